"""Scalar fields, domains and the sup / inf / mean ball queries.

Two backings are offered.  :class:`AnalyticField` wraps a closed-form
expression (optionally with gradient, Hessian and a closed-form
p-Laplacian).  :class:`LatticeField` stores node values on a uniform grid and
interpolates multilinearly.

Suprema and infima over a ball are *inner* approximations: the maximum over
a finite sample set made of the centre, interior points (lattice nodes
strictly inside, or a regular grid for analytic fields) and points on the
bounding sphere.  For a 1-d lattice this is the exact supremum of the
piecewise-linear interpolant.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.special import ndtri
from scipy.stats import qmc


class RadiusBelowResolution(ValueError):
    """A lattice ball query with radius smaller than half a cell."""


class OutsideDefinitionRegion(ValueError):
    """A ball query leaves the region where the field is defined."""


# ---------------------------------------------------------------------------
# fields


class ScalarField:
    """A real function of a point in ``R^d``.

    ``field(points)`` accepts one point of shape ``(d,)`` (returns a float)
    or a batch of shape ``(n, d)`` (returns an array of ``n`` values).
    """

    d: int

    def __call__(self, points):
        pts = np.asarray(points, dtype=float)
        single = pts.ndim <= 1
        pts = pts.reshape(-1, self.d)
        out = self._eval(pts)
        return float(out[0]) if single else out

    def _eval(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(eq=False)
class AnalyticField(ScalarField):
    """Closed-form field.

    ``func`` maps an ``(n, d)`` array to ``n`` values.  ``gradient`` and
    ``hessian`` map a single point to ``(d,)`` and ``(d, d)`` arrays.
    ``plap(x, params)`` may give the p-Laplacian in closed form; it is used
    at critical points where the normalized formula is undefined.
    """

    d: int
    func: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray] | None = None
    hessian: Callable[[np.ndarray], np.ndarray] | None = None
    plap: Callable | None = None
    name: str = "analytic"

    def _eval(self, pts):
        return np.asarray(self.func(pts), dtype=float).reshape(len(pts))

    def __neg__(self):
        return AnalyticField(
            self.d,
            lambda x: -self.func(x),
            None if self.gradient is None else (lambda x: -np.asarray(self.gradient(x))),
            None if self.hessian is None else (lambda x: -np.asarray(self.hessian(x))),
            None if self.plap is None else (lambda x, prm: -self.plap(x, prm)),
            name=f"-{self.name}",
        )

    def shifted(self, xi: float) -> AnalyticField:
        """Same field plus the constant ``xi``."""
        return AnalyticField(
            self.d, lambda x: self.func(x) + xi, self.gradient, self.hessian, self.plap, name=f"{self.name}+{xi}"
        )


class LatticeField(ScalarField):
    """Node values on the uniform grid ``origin + h * index``.

    Evaluation between nodes is multilinear, so node values are reproduced
    exactly and every interpolated value lies between the corner values of
    its cell.
    """

    def __init__(self, values, origin, h: float):
        self.values = np.asarray(values, dtype=float)
        self.origin = np.atleast_1d(np.asarray(origin, dtype=float))
        self.h = float(h)
        self.d = self.origin.size
        if self.values.ndim != self.d:
            raise ValueError(f"values have {self.values.ndim} axes, origin has {self.d} components")
        if not self.h > 0:
            raise ValueError("cell size must be positive")

    @property
    def shape(self):
        return self.values.shape

    @property
    def upper(self):
        return self.origin + self.h * (np.asarray(self.shape) - 1)

    def with_values(self, values) -> LatticeField:
        return LatticeField(values, self.origin, self.h)

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape ``(*shape, d)``."""
        axes = [self.origin[i] + self.h * np.arange(n) for i, n in enumerate(self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def index_coords(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.origin) / self.h

    def covers(self, pts, slack: float = 1e-9) -> np.ndarray:
        idx = self.index_coords(np.asarray(pts, dtype=float).reshape(-1, self.d))
        upper = np.asarray(self.shape) - 1
        return np.all((idx >= -slack) & (idx <= upper + slack), axis=1)

    def _eval(self, pts):
        if not np.all(self.covers(pts)):
            raise OutsideDefinitionRegion("interpolation point outside the lattice")
        idx = self.index_coords(pts)
        upper = np.asarray(self.shape) - 1
        idx = np.clip(idx, 0, upper)
        return ndimage.map_coordinates(self.values, idx.T, order=1, mode="nearest")

    # -- serialization ---------------------------------------------------
    def _header(self) -> dict:
        return {
            "d": self.d,
            "h": self.h,
            "origin": self.origin.tolist(),
            "upper": self.upper.tolist(),
            "shape": list(self.shape),
            "count": int(self.values.size),
        }

    def to_csv(self, path) -> None:
        head = self._header()
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# d={head['d']}\n")
            fh.write(f"# h={float(head['h'])!r}\n")
            fh.write("# origin=" + ",".join(repr(v) for v in head["origin"]) + "\n")
            fh.write("# upper=" + ",".join(repr(v) for v in head["upper"]) + "\n")
            fh.write("# shape=" + ",".join(str(v) for v in head["shape"]) + "\n")
            fh.write(f"# count={head['count']}\n")
            fh.write("value\n")
            for v in self.values.ravel(order="C").tolist():
                fh.write(f"{v!r}\n")

    @classmethod
    def from_csv(cls, path) -> LatticeField:
        meta = {}
        values = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("#"):
                    key, _, val = line[1:].strip().partition("=")
                    meta[key] = val
                elif line and line != "value":
                    values.append(float(line))
        shape = tuple(int(s) for s in meta["shape"].split(","))
        if len(values) != int(meta["count"]):
            raise ValueError(f"expected {meta['count']} values, read {len(values)}")
        origin = [float(s) for s in meta["origin"].split(",")]
        return cls(np.array(values).reshape(shape), origin, float(meta["h"]))

    _MAGIC = b"PLAPLAT1"

    def to_bytes(self) -> bytes:
        head = json.dumps(self._header()).encode()
        buf = io.BytesIO()
        buf.write(self._MAGIC)
        buf.write(struct.pack("<I", len(head)))
        buf.write(head)
        buf.write(self.values.astype("<f8").tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> LatticeField:
        if blob[:8] != cls._MAGIC:
            raise ValueError("not a lattice field blob")
        (n,) = struct.unpack("<I", blob[8:12])
        head = json.loads(blob[12 : 12 + n])
        values = np.frombuffer(blob[12 + n :], dtype="<f8")
        if values.size != head["count"]:
            raise ValueError("truncated lattice field blob")
        return cls(values.reshape(head["shape"]).copy(), head["origin"], head["h"])


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class Box:
    """Open axis-aligned box.  Only faces are used as barrier anchors, where
    the exterior ball condition holds."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in np.atleast_1d(self.lo)))
        object.__setattr__(self, "hi", tuple(float(v) for v in np.atleast_1d(self.hi)))
        if len(self.lo) != len(self.hi) or any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError("box needs lo < hi componentwise")

    @property
    def d(self):
        return len(self.lo)

    def bounds(self):
        return np.array(self.lo), np.array(self.hi)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        lo, hi = self.bounds()
        return np.all((x > lo) & (x < hi), axis=1)

    def distance(self, x) -> np.ndarray:
        """Euclidean distance to the closure (0 inside)."""
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        lo, hi = self.bounds()
        gap = np.maximum(np.maximum(lo - x, x - hi), 0.0)
        return np.linalg.norm(gap, axis=1)

    def boundary_distance(self, x) -> np.ndarray:
        """Distance from interior points to the boundary."""
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        lo, hi = self.bounds()
        return np.min(np.minimum(x - lo, hi - x), axis=1)

    def diameter(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def exterior_band(self, width: float) -> Callable[[np.ndarray], np.ndarray]:
        return lambda x: ~self.contains(x) & (self.distance(x) < width)

    def sample_boundary(self, n: int = 64) -> np.ndarray:
        lo, hi = self.bounds()
        if self.d == 1:
            return np.array([[lo[0]], [hi[0]]])
        rng = np.random.default_rng(0)
        pts = rng.uniform(lo, hi, size=(n, self.d))
        axis = rng.integers(0, self.d, size=n)
        side = rng.integers(0, 2, size=n)
        pts[np.arange(n), axis] = np.where(side == 0, lo[axis], hi[axis])
        return pts

    def describe(self) -> dict:
        return {"shape": "box", "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in np.atleast_1d(self.center)))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    @property
    def d(self):
        return len(self.center)

    def bounds(self):
        c = np.array(self.center)
        return c - self.radius, c + self.radius

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        return np.linalg.norm(x - np.array(self.center), axis=1) < self.radius

    def distance(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        return np.maximum(np.linalg.norm(x - np.array(self.center), axis=1) - self.radius, 0.0)

    def boundary_distance(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        return self.radius - np.linalg.norm(x - np.array(self.center), axis=1)

    def diameter(self) -> float:
        return 2 * self.radius

    def exterior_band(self, width: float) -> Callable[[np.ndarray], np.ndarray]:
        return lambda x: ~self.contains(x) & (self.distance(x) < width)

    def sample_boundary(self, n: int = 64) -> np.ndarray:
        dirs = sphere_directions(self.d, max(n, 2))
        return np.array(self.center) + self.radius * dirs

    def describe(self) -> dict:
        return {"shape": "ball", "center": list(self.center), "radius": self.radius}


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SamplingSpec:
    """Resolution of the ball sample sets.

    ``h`` is the interior sample spacing for analytic fields (lattice fields
    always use their own nodes); when ``None`` it is ``radius /
    rel_resolution``.  Boundary points number ``max(min_boundary, 2 d
    ceil(radius / h))``; they are prefixes of one deterministic low-discrepancy
    sequence, so a finer spec samples a superset.
    """

    h: float | None = None
    min_boundary: int = 16
    gauss_order: int = 24
    rel_resolution: int | None = None
    seed: int = 0

    def interior_spacing(self, radius: float, d: int) -> float:
        if self.h is not None:
            return self.h
        res = self.rel_resolution or {1: 256, 2: 48}.get(d, 12)
        return radius / res

    def refined(self) -> SamplingSpec:
        res = self.rel_resolution
        return SamplingSpec(
            h=None if self.h is None else self.h / 2,
            min_boundary=2 * self.min_boundary,
            gauss_order=self.gauss_order,
            rel_resolution=None if res is None else 2 * res,
            seed=self.seed,
        )


DEFAULT_SAMPLING = SamplingSpec()


def _van_der_corput(n: int, base: int = 2) -> np.ndarray:
    out = np.zeros(n)
    for k in range(n):
        q, denom, i = 0.0, 1.0, k
        while i:
            i, rem = divmod(i, base)
            denom *= base
            q += rem / denom
        out[k] = q
    return out


@lru_cache(maxsize=256)
def _sphere_directions_cached(d: int, n: int, seed: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    half = (n + 1) // 2
    if d == 2:
        rot = np.random.default_rng(seed).uniform(0, np.pi)
        ang = rot + np.pi * _van_der_corput(half)
        base = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        u = qmc.Halton(d=d, scramble=True, seed=seed).random(half)
        g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
        base = g / np.linalg.norm(g, axis=1, keepdims=True)
    dirs = np.empty((2 * half, d))
    dirs[0::2] = base
    dirs[1::2] = -base
    dirs.setflags(write=False)
    return dirs


def sphere_directions(d: int, n: int, seed: int = 0) -> np.ndarray:
    """Unit vectors in antipodal pairs; ``sphere_directions(d, n)`` is a prefix
    of ``sphere_directions(d, n')`` for ``n <= n'`` (even counts)."""
    return _sphere_directions_cached(int(d), int(n), int(seed))


def boundary_count(d: int, radius: float, h: float, spec: SamplingSpec) -> int:
    if d == 1:
        return 2
    n = max(spec.min_boundary, 2 * d * math.ceil(radius / h))
    return n + (n % 2)


@lru_cache(maxsize=64)
def _gauss_legendre(n: int):
    return np.polynomial.legendre.leggauss(n)


@lru_cache(maxsize=256)
def _analytic_mean_rule(d: int, order: int):
    """Quadrature on the unit ball: (offsets, weights), weights sum to one,
    symmetric under ``y -> -y``."""
    x, w = _gauss_legendre(order)
    if d == 1:
        return x[:, None], w / w.sum()
    if d == 2:
        # radial Gauss on [0, 1] with weight r, uniform angles
        r = (x + 1) / 2
        wr = w / 2 * r
        nt = 2 * order
        th = 2 * np.pi * (np.arange(nt) + 0.5) / nt
        pts = (r[:, None, None] * np.stack([np.cos(th), np.sin(th)], axis=1)[None]).reshape(-1, 2)
        wts = np.repeat(wr, nt)
        return pts, wts / wts.sum()
    n = 2 * order
    ax = (np.arange(n) + 0.5) / n * 2 - 1
    grid = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    inside = np.linalg.norm(grid, axis=1) < 1
    pts = grid[inside]
    return pts, np.full(len(pts), 1.0 / len(pts))


def _lattice_mean_rule(d: int, frac: np.ndarray, rh: float):
    """Quadrature offsets (in index units, relative to the centre) and weights
    for the mean of a multilinear interpolant over a ball of radius ``rh``
    cells whose centre sits at fractional index ``frac``.

    In 1-d the points are the midpoints of the pieces of each cell cut by
    the ball, which integrates the piecewise-linear interpolant exactly.  In
    higher dimension a sub-cell midpoint rule symmetric about the centre is
    used.
    """
    if d == 1:
        f = float(frac[0])
        a, b = f - rh, f + rh
        cuts = np.arange(math.floor(a) + 1, math.ceil(b))
        edges = np.concatenate([[a], cuts, [b]])
        lengths = np.diff(edges)
        mids = (edges[:-1] + edges[1:]) / 2 - f
        return mids[:, None], lengths / lengths.sum()
    s = max(2, math.ceil(8 / max(rh, 1e-12)))
    s = min(s, 64)
    hs = 1.0 / s
    k = math.ceil(rh / hs)
    ax = (np.arange(-k, k) + 0.5) * hs
    grid = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    pts = grid[np.linalg.norm(grid, axis=1) < rh]
    if len(pts) == 0:
        pts = np.zeros((1, d))
    return pts, np.full(len(pts), 1.0 / len(pts))


@dataclass(frozen=True)
class BallStats:
    sup: float
    inf: float
    mean: float


def _check_radius(radius):
    if not radius > 0:
        raise ValueError(f"ball radius must be positive, got {radius}")


def _lattice_center_index(phi: LatticeField, center):
    ci = phi.index_coords(center)
    near = np.round(ci)
    return np.where(np.abs(ci - near) < 1e-9, near, ci)


def ball_samples(phi: ScalarField, center, radius: float, sampling: SamplingSpec | None = None,
                 allow_subresolution: bool = False):
    """Sample points and values used for the sup / inf over ``B_radius(center)``."""
    sampling = sampling or DEFAULT_SAMPLING
    _check_radius(radius)
    center = np.atleast_1d(np.asarray(center, dtype=float))
    d = phi.d
    if isinstance(phi, LatticeField):
        h = phi.h
        if radius < h / 2 and not allow_subresolution:
            raise RadiusBelowResolution(f"radius {radius:.3g} below half the cell size {h:.3g}")
        ci = _lattice_center_index(phi, center)
        rh = radius / h
        if np.any(ci - rh < -1e-9) or np.any(ci + rh > np.asarray(phi.shape) - 1 + 1e-9):
            raise OutsideDefinitionRegion("ball leaves the lattice")
        ranges = [np.arange(math.ceil(c - rh), math.floor(c + rh) + 1) for c in ci]
        idx = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, d)
        dist = np.linalg.norm(idx - ci, axis=1)
        idx = idx[dist < rh]
        node_pts = phi.origin + h * idx
        node_vals = phi.values[tuple(idx.T.astype(int))] if len(idx) else np.empty(0)
        dirs = sphere_directions(d, boundary_count(d, radius, h, sampling), sampling.seed)
        bpts = center + radius * dirs
        pts = np.vstack([center[None], node_pts, bpts])
        vals = np.concatenate([[phi(center)], node_vals, phi(bpts)])
        return pts, vals
    hs = sampling.interior_spacing(radius, d)
    k = math.floor(radius / hs)
    ax = np.arange(-k, k + 1) * hs
    grid = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    grid = grid[np.linalg.norm(grid, axis=1) < radius]
    dirs = sphere_directions(d, boundary_count(d, radius, hs, sampling), sampling.seed)
    pts = np.vstack([center[None], center + grid, center + radius * dirs])
    return pts, phi(pts)


def ball_mean(phi: ScalarField, center, radius: float, sampling: SamplingSpec | None = None) -> float:
    sampling = sampling or DEFAULT_SAMPLING
    _check_radius(radius)
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if isinstance(phi, LatticeField):
        ci = _lattice_center_index(phi, center)
        offs, w = _lattice_mean_rule(phi.d, ci - np.floor(ci), radius / phi.h)
        return float(w @ phi(center + phi.h * offs))
    offs, w = _analytic_mean_rule(phi.d, sampling.gauss_order)
    return float(w @ phi(center + radius * offs))


def ball_stats(phi: ScalarField, center, radius: float, sampling: SamplingSpec | None = None,
               allow_subresolution: bool = False) -> BallStats:
    """Sampled sup, sampled inf and quadrature mean of ``phi`` over the closed
    ball of ``radius`` around ``center``."""
    _, vals = ball_samples(phi, center, radius, sampling, allow_subresolution)
    mean = ball_mean(phi, center, radius, sampling)
    return BallStats(float(vals.max()), float(vals.min()), mean)


# ---------------------------------------------------------------------------
# node-centred stencils for whole-lattice evaluation


@dataclass
class BallStencil:
    """The sample set and mean weights of :func:`ball_stats` for a ball
    centred at a lattice node, expressed as index offsets.

    ``footprint`` marks nodes strictly inside (centre included).  Each
    sphere point is a list of ``(offset, weight)`` corner contributions.
    ``kernel`` holds mean weights per node offset.
    """

    radius: float
    h: float
    d: int
    half: int
    footprint: np.ndarray
    sphere_offsets: np.ndarray  # (n_pts, 2**d, d) int
    sphere_weights: np.ndarray  # (n_pts, 2**d)
    kernel: np.ndarray
    subresolution: bool = field(default=False)

    @classmethod
    def build(cls, radius: float, h: float, d: int, sampling: SamplingSpec | None = None) -> BallStencil:
        sampling = sampling or DEFAULT_SAMPLING
        _check_radius(radius)
        rh = radius / h
        half = math.floor(rh) + 1
        ax = np.arange(-half, half + 1)
        grid = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1)
        footprint = np.linalg.norm(grid, axis=-1) < rh

        dirs = sphere_directions(d, boundary_count(d, radius, h, sampling), sampling.seed)
        pts = dirs * rh
        base = np.floor(pts)
        frac = pts - base
        corners = np.array(np.meshgrid(*([[0, 1]] * d), indexing="ij")).reshape(d, -1).T
        offsets = base[:, None, :].astype(int) + corners[None]
        weights = np.prod(np.where(corners[None] == 1, frac[:, None, :], 1 - frac[:, None, :]), axis=-1)

        q_offs, q_w = _lattice_mean_rule(d, np.zeros(d), rh)
        kernel = np.zeros((2 * half + 1,) * d)
        qb = np.floor(q_offs)
        qf = q_offs - qb
        for corner in corners:
            cw = np.prod(np.where(corner == 1, qf, 1 - qf), axis=1) * q_w
            at = (qb + corner).astype(int) + half
            np.add.at(kernel, tuple(at.T), cw)
        return cls(radius, h, d, half, footprint, offsets, weights, kernel, subresolution=rh < 0.5)


def _pad(values: np.ndarray, width: int) -> np.ndarray:
    return np.pad(values, width, mode="edge")


def _shifted(padded: np.ndarray, width: int, offset, shape) -> np.ndarray:
    sl = tuple(slice(width + o, width + o + n) for o, n in zip(offset, shape))
    return padded[sl]


def stencil_stats(values: np.ndarray, stencil: BallStencil, padded: np.ndarray | None = None,
                  pad_width: int | None = None, mean: bool = True):
    """Sampled sup, inf and mean at every node.  Only nodes at least
    ``stencil.half`` cells from the lattice edge are meaningful."""
    shape = values.shape
    if padded is None:
        pad_width = stencil.half + 1
        padded = _pad(values, pad_width)
    sup = ndimage.maximum_filter(values, footprint=stencil.footprint, mode="nearest")
    inf = ndimage.minimum_filter(values, footprint=stencil.footprint, mode="nearest")
    for offs, wts in zip(stencil.sphere_offsets, stencil.sphere_weights):
        pt = np.zeros(shape)
        for o, w in zip(offs, wts):
            if w != 0.0:
                pt += w * _shifted(padded, pad_width, o, shape)
        np.maximum(sup, pt, out=sup)
        np.minimum(inf, pt, out=inf)
    avg = ndimage.correlate(values, stencil.kernel, mode="nearest") if mean else None
    return sup, inf, avg
