"""Explicit Euler iteration ``u^{j+1} = A_eps[u^j]`` and its property checks.

The lattice covers the closure of the domain plus an exterior layer as wide
as the largest ball the operator queries.  Every exterior node carries the
exterior datum ``g``; interior nodes are updated by the operator.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .amvf import CGrid, LatticeOperator
from .core import Params
from .field import AnalyticField, Ball, Box, LatticeField, SamplingSpec, ScalarField


class NumericalAbort(RuntimeError):
    """A step produced a non-finite value."""


def default_h(params: Params) -> float:
    """Cell size resolving the smallest ball: ``eps^2 m^(1-alpha) / 4``."""
    return params.eps**2 * params.m_eps ** (1 - params.alpha) / 4


def _field_norm(f: ScalarField, pts: np.ndarray) -> float:
    return float(np.max(np.abs(f(pts)))) if len(pts) else 0.0


@dataclass
class DirichletProblem:
    """Bounded-domain problem: domain, initial datum, exterior datum, horizon.

    ``g`` is time independent; it is evaluated once on the exterior nodes.
    """

    domain: Box | Ball
    u0: ScalarField
    g: ScalarField
    T: float
    params: Params
    h: float | None = None
    cgrid: CGrid | None = None
    sampling: SamplingSpec | None = None
    label: str = ""

    def __post_init__(self):
        if self.domain.d != self.params.d:
            raise ValueError("domain and params disagree on the dimension")
        if not self.T > 0:
            raise ValueError("final time must be positive")
        if self.h is None:
            self.h = default_h(self.params)
        if self.h > self.params.band_width:
            raise ValueError(f"cell size {self.h:.3g} exceeds the band width {self.params.band_width:.3g}")
        if self.cgrid is None:
            self.cgrid = CGrid.for_params(self.params)
        self._cache = {}

    @property
    def steps(self) -> int:
        """Number of Euler steps; ``T`` is rounded up to the time mesh."""
        return int(math.ceil(self.T / self.params.tau - 1e-9))

    def lattice(self):
        """Node origin, shape and masks (interior, band) of the solution lattice."""
        if "lattice" in self._cache:
            return self._cache["lattice"]
        h = self.h
        lo, hi = self.domain.bounds()
        pad = self.params.reach + 2 * h
        op = self.operator()
        i_lo = np.floor((lo - pad) / h).astype(int)
        i_hi = np.ceil((hi + pad) / h).astype(int)
        origin = i_lo * h
        shape = tuple(int(v) for v in (i_hi - i_lo + 1))
        probe = LatticeField(np.zeros(shape), origin, h)
        nodes = probe.nodes().reshape(-1, self.params.d)
        interior = self.domain.contains(nodes).reshape(shape)
        dist = self.domain.distance(nodes).reshape(shape)
        band = ~interior & (dist < self.params.band_width)
        # a node needs its full stencil inside the lattice
        reach_nodes = int(math.ceil(self.params.reach / h)) + 1
        for axis, n in enumerate(shape):
            idx = np.nonzero(interior.any(axis=tuple(a for a in range(len(shape)) if a != axis)))[0]
            if idx.size and (idx.min() < reach_nodes or idx.max() > n - 1 - reach_nodes):
                raise AssertionError("lattice padding too small")
        out = (origin, shape, interior, band, nodes)
        self._cache["lattice"] = out
        return out

    def operator(self) -> LatticeOperator:
        if "op" not in self._cache:
            self._cache["op"] = LatticeOperator(self.params, self.h, self.cgrid, self.sampling)
        return self._cache["op"]

    def initial_field(self) -> LatticeField:
        origin, shape, interior, _, nodes = self.lattice()
        vals = np.where(interior.ravel(), self.u0(nodes), self.g(nodes)).reshape(shape)
        return LatticeField(vals, origin, self.h)

    def exterior_values(self) -> np.ndarray:
        if "g_nodes" not in self._cache:
            _, shape, _, _, nodes = self.lattice()
            self._cache["g_nodes"] = self.g(nodes).reshape(shape)
        return self._cache["g_nodes"]

    def norms(self) -> tuple[float, float]:
        """Sup norms of ``u0`` on the interior nodes and ``g`` on the exterior nodes."""
        _, _, interior, _, nodes = self.lattice()
        inside = interior.ravel()
        return _field_norm(self.u0, nodes[inside]), _field_norm(self.g, nodes[~inside])

    def describe(self) -> dict:
        return {
            "label": self.label,
            "domain": self.domain.describe(),
            "u0": getattr(self.u0, "name", type(self.u0).__name__),
            "g": getattr(self.g, "name", type(self.g).__name__),
            "T": self.T,
            "h": self.h,
            "n_c": len(self.cgrid),
            "params": self.params.as_dict(),
        }


@dataclass
class SpaceTimeSolution:
    """Fields ``u^j`` on the mesh ``t_j = j tau``, ``j = 0..J``."""

    params: Params
    fields: list
    interior: np.ndarray
    band: np.ndarray
    description: dict = field(default_factory=dict)
    fallbacks: int = 0
    truncation_eta: float | None = None

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.fields)) * self.params.tau

    @property
    def h(self) -> float:
        return self.fields[0].h

    def index_for_time(self, t: float) -> int:
        """Mesh index holding the value at time ``t`` (``ceil(t / tau)``)."""
        j = int(math.ceil(t / self.params.tau - 1e-9))
        if j < 0 or j >= len(self.fields):
            raise ValueError(f"time {t} outside the computed horizon")
        return j

    def value(self, x, t: float):
        return self.fields[self.index_for_time(t)](x)

    def sup_norms(self, where: str = "all") -> np.ndarray:
        mask = {"all": None, "interior": self.interior}[where]
        out = []
        for f in self.fields:
            v = f.values if mask is None else f.values[mask]
            out.append(float(np.max(np.abs(v))))
        return np.array(out)

    def digest(self) -> str:
        hsh = hashlib.sha256()
        for f in self.fields:
            hsh.update(np.ascontiguousarray(f.values).tobytes())
        return hsh.hexdigest()

    def export(self, directory, stride: int = 1, extra: dict | None = None) -> dict:
        """One CSV per recorded time plus ``manifest.json``."""
        os.makedirs(directory, exist_ok=True)
        files = []
        for j in range(0, len(self.fields), max(1, int(stride))):
            name = f"u_{j:05d}.csv"
            self.fields[j].to_csv(os.path.join(directory, name))
            files.append({"index": j, "t": j * self.params.tau, "file": name})
        manifest = {
            "params": self.params.as_dict(),
            "problem": self.description,
            "sup_norms": self.sup_norms().tolist(),
            "interior_sup_norms": self.sup_norms("interior").tolist(),
            "fallbacks": int(self.fallbacks),
            "truncation_eta": self.truncation_eta,
            "digest": self.digest(),
            "files": files,
        }
        if extra:
            manifest.update(extra)
        with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        return manifest


# ---------------------------------------------------------------------------
# stepping


def dpp_step(u: LatticeField, problem: DirichletProblem) -> LatticeField:
    """One Euler step: the operator at interior nodes, ``g`` elsewhere."""
    _, shape, interior, _, _ = problem.lattice()
    if u.shape != shape:
        raise ValueError("field does not live on the problem lattice")
    new = problem.operator().apply(u.values)
    out = np.where(interior, new, problem.exterior_values())
    if not np.all(np.isfinite(out)):
        raise NumericalAbort("non-finite value after a step")
    return u.with_values(out)


def solve_bounded(problem: DirichletProblem, progress: Callable[[int], None] | None = None) -> SpaceTimeSolution:
    u = problem.initial_field()
    if not np.all(np.isfinite(u.values)):
        raise NumericalAbort("non-finite initial data")
    fields = [u]
    for j in range(problem.steps):
        u = dpp_step(u, problem)
        fields.append(u)
        if progress is not None:
            progress(j + 1)
    _, _, interior, band, _ = problem.lattice()
    fb = problem.operator().fallbacks_per_node * int(interior.sum()) * problem.steps
    return SpaceTimeSolution(problem.params, fields, interior, band, problem.describe(), fallbacks=fb)


def growth_rate(p: float) -> float:
    """``L = 2 (p-1)^(1/(p-1))`` of the exponential supersolution."""
    return 2 * (p - 1) ** (1 / (p - 1))


def truncation_halfwidth(C: float, p: float, T: float, eta: float) -> float:
    """Smallest ``K`` with ``C e^{L T} e^{-K} <= eta``."""
    return math.log(C * math.exp(growth_rate(p) * T) / eta)


def decay_constant(u0: ScalarField, d: int, radius: float = 30.0, n: int = 4001) -> float:
    """Smallest ``C`` with ``|u0(x)| <= C e^{-|x|}`` on a sample set."""
    if d == 1:
        pts = np.linspace(-radius, radius, n)[:, None]
    else:
        rng = np.random.default_rng(0)
        dirs = rng.standard_normal((n, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = dirs * rng.uniform(0, radius, size=(n, 1))
    r = np.linalg.norm(pts, axis=1)
    return float(np.max(np.abs(u0(pts)) * np.exp(r)))


def solve_whole_space(u0: ScalarField, T: float, params: Params, h: float | None = None,
                      K: float | None = None, eta: float | None = None, C: float | None = None,
                      cgrid: CGrid | None = None, sampling: SamplingSpec | None = None) -> SpaceTimeSolution:
    """Whole-space problem truncated to the box ``(-K, K)^d`` with ``g = 0`` outside.

    ``eta`` defaults to ``1e-3 ||u0||``; ``K`` defaults to the a-priori value
    making the exponential supersolution at most ``eta`` outside the box.
    """
    d = params.d
    probe = np.linspace(-5, 5, 2001)[:, None] if d == 1 else np.random.default_rng(1).uniform(-5, 5, (4000, d))
    sup_u0 = float(np.max(np.abs(u0(probe))))
    if eta is None:
        eta = 1e-3 * sup_u0 if sup_u0 > 0 else 1e-3
    C_fit = decay_constant(u0, d)
    if C is None:
        C = C_fit
    elif C_fit > C * (1 + 1e-9):
        raise ValueError(f"initial datum violates |u0| <= {C} e^(-|x|) (needs C >= {C_fit:.4g})")
    if K is None:
        K = max(truncation_halfwidth(C, params.p, T, eta), 1.0) if C > 0 else 1.0
    box = Box((-K,) * d, (K,) * d)
    zero = AnalyticField(d, lambda x: np.zeros(len(x)), name="zero")
    prob = DirichletProblem(box, u0, zero, T, params, h, cgrid, sampling, label="whole_space")
    sol = solve_bounded(prob)
    sol.truncation_eta = float(eta)
    sol.description.update({"K": K, "decay_C": C, "L": growth_rate(params.p)})
    return sol


# ---------------------------------------------------------------------------
# structural checks


@dataclass
class PairReport:
    violations: int
    worst: float
    step_contraction_violations: int
    total_bound_violations: int


def comparison_report(upper: SpaceTimeSolution, lower: SpaceTimeSolution, tol: float = 0.0) -> PairReport:
    """Ordering ``lower <= upper`` at every node and step, plus step-wise
    and overall sup-norm contraction of the difference."""
    violations = 0
    worst = 0.0
    step_viol = 0
    diffs = []
    for fu, fl in zip(upper.fields, lower.fields):
        gap = fl.values - fu.values
        violations += int(np.sum(gap > tol))
        worst = max(worst, float(gap.max()))
        diffs.append(float(np.max(np.abs(fu.values - fl.values))))
    for a, b in zip(diffs[:-1], diffs[1:]):
        if b > a + tol:
            step_viol += 1
    total = int(sum(dv > diffs[0] + tol for dv in diffs))
    return PairReport(violations, worst, step_viol, total)


def contraction_profile(u: SpaceTimeSolution, v: SpaceTimeSolution) -> np.ndarray:
    return np.array([float(np.max(np.abs(a.values - b.values))) for a, b in zip(u.fields, v.fields)])


# ---------------------------------------------------------------------------
# barriers


BARRIER_KINDS = ("boundary_lower", "boundary_upper", "initial_lower", "initial_upper", "exponential")


@dataclass
class Barrier:
    """Closed-form space-time barrier ``w(x, t)``."""

    kind: str
    func: Callable[[np.ndarray, float], np.ndarray]
    constants: dict
    dt: Callable[[np.ndarray, float], np.ndarray] | None = None
    spatial: Callable[[float], AnalyticField] | None = None

    def __call__(self, x, t: float):
        pts = np.asarray(x, dtype=float)
        single = pts.ndim <= 1
        d = self.constants.get("d", 1)
        out = self.func(pts.reshape(-1, d), float(t))
        return float(out[0]) if single else out


def _lipschitz_estimate(f: ScalarField, domain, n: int = 4001) -> float:
    lo, hi = domain.bounds()
    d = len(lo)
    if d == 1:
        xs = np.linspace(lo[0], hi[0], n)[:, None]
        v = f(xs)
        return float(np.max(np.abs(np.diff(v)) / np.diff(xs[:, 0])))
    rng = np.random.default_rng(2)
    a = rng.uniform(lo, hi, (n, d))
    b = a + rng.normal(scale=1e-4 * np.max(hi - lo), size=(n, d))
    return float(np.max(np.abs(f(a) - f(b)) / np.linalg.norm(a - b, axis=1)))


def build_barrier(kind: str, params: Params, *, domain=None, u0: ScalarField | None = None,
                  g: ScalarField | None = None, anchor=None, eta: float = 0.1, T: float = 1.0,
                  norm: float | None = None, lip: float | None = None, R: float | None = None,
                  C: float = 1.0, direction=None) -> Barrier:
    """Instantiate one of the barrier families with all constants computed.

    ``norm`` is ``||u0|| + ||g||`` (estimated on samples when omitted).
    ``initial_*`` kinds need ``u0``, ``domain`` and an interior ``anchor``;
    ``boundary_*`` kinds need ``g``, ``domain`` and a boundary ``anchor``;
    ``exponential`` needs ``C`` and a unit ``direction``.
    """
    if kind not in BARRIER_KINDS:
        raise ValueError(f"unknown barrier kind {kind!r}")
    if not eta > 0:
        raise ValueError("eta must be positive")
    p, d = params.p, params.d

    if kind == "exponential":
        L = growth_rate(p)
        z = np.zeros(d) if direction is None else np.atleast_1d(np.asarray(direction, dtype=float))
        if direction is None:
            z[0] = 1.0
        if abs(np.linalg.norm(z) - 1) > 1e-12:
            raise ValueError("direction must be a unit vector")
        if not C > 0:
            raise ValueError("C must be positive")

        def spatial(t, z=z):
            s = C * math.exp(L * t)
            return AnalyticField(
                d,
                lambda x: s * np.exp(x @ z),
                lambda x: s * math.exp(float(np.asarray(x) @ z)) * z,
                lambda x: s * math.exp(float(np.asarray(x) @ z)) * np.outer(z, z),
                None,
                name="exp_barrier",
            )

        return Barrier(
            kind,
            lambda x, t: C * math.exp(L * t) * np.exp(x @ z),
            {"d": d, "C": C, "L": L, "direction": z.tolist()},
            dt=lambda x, t: L * C * math.exp(L * t) * np.exp(np.asarray(x).reshape(-1, d) @ z),
            spatial=spatial,
        )

    if domain is None or anchor is None:
        raise ValueError(f"{kind} barrier needs a domain and an anchor point")
    x0 = np.atleast_1d(np.asarray(anchor, dtype=float))
    sign = 1.0 if kind.endswith("lower") else -1.0
    boundary_pts = domain.sample_boundary(256)

    if norm is None:
        lo, hi = domain.bounds()
        inner = np.random.default_rng(3).uniform(lo, hi, (4000, d))
        inner = inner[domain.contains(inner)]
        nu = _field_norm(u0, inner) if u0 is not None else 0.0
        outer = boundary_pts
        ng = _field_norm(g, outer) if g is not None else 0.0
        norm = nu + ng
    N = float(norm)

    if kind.startswith("initial"):
        if u0 is None:
            raise ValueError("initial barriers need u0")
        if not domain.contains(x0)[0]:
            raise ValueError("initial barriers need an anchor inside the domain")
        b = (3 * p - 2) / (p - 1)
        dist = float(domain.boundary_distance(x0)[0])
        if lip is None:
            lip = _lipschitz_estimate(u0, domain)
        r = eta / (2 * lip) if lip > 0 else dist
        r = min(r, dist)
        k2 = 2 * max(2 * r ** (-b), (2 / dist) ** b)
        c_dp = (3 * p - 2) / (p - 1) * (2 * p - 2 + d) ** (1 / (p - 1))
        k1 = c_dp * domain.diameter() ** 2 * k2 * N + 2
        ux0 = float(u0(x0))

        def func(x, t):
            rr = np.linalg.norm(x - x0, axis=1)
            return sign * (k1 * (1 - math.exp(t)) - k2 * N * rr**b) + ux0 - sign * eta

        def dt(x, t):
            return np.full(len(np.asarray(x).reshape(-1, d)), -sign * k1 * math.exp(t))

        consts = {"d": d, "k1": k1, "k2": k2, "beta": b, "r": r, "norm": N, "eta": eta,
                  "anchor": x0.tolist(), "C_dp": c_dp, "u0_anchor": ux0}
        return Barrier(kind, func, consts, dt=dt)

    # boundary kinds
    if g is None:
        raise ValueError("boundary barriers need g")
    if float(domain.boundary_distance(x0)[0]) > 1e-9 or float(domain.distance(x0)[0]) > 1e-9:
        raise ValueError("boundary barriers need an anchor on the boundary")
    if R is None:
        R = 1.0
    if not R > 0:
        raise ValueError("exterior ball radius must be positive")
    normal = _outer_normal(domain, x0)
    z0 = x0 + R * normal
    a = (p + d - 2) / (p - 1)
    big = domain.diameter() + R
    rate = a * (a * (p - 1) + p - d) ** (1 / (p - 1)) * big ** (-a - p / (p - 1))
    k_pde = (1 + 2 * N / T) / rate
    gx0 = float(g(x0))
    rz = np.linalg.norm(boundary_pts - z0, axis=1)
    gap = R ** (-a) - rz ** (-a)
    need = sign * (gx0 - g(boundary_pts)) - eta / 2
    ok = gap > 1e-12
    k_bdry = float(np.max(np.where(ok & (need > 0), need / np.where(ok, gap, 1), 0.0)))
    k = max(k_pde, k_bdry)

    def func(x, t):
        rr = np.linalg.norm(x - z0, axis=1)
        par = -(t**2) / T**2 + 2 * t / T - 1
        return sign * (k * (rr ** (-a) - R ** (-a)) + par * N) + gx0 - sign * eta

    def dt(x, t):
        return np.full(len(np.asarray(x).reshape(-1, d)), sign * (-2 * t / T**2 + 2 / T) * N)

    grad_max = k * a * (R) ** (-a - 1)
    lip_g = lip if lip is not None else _lipschitz_estimate(g, _band_box(domain, params.band_width))
    eps_bar = _eps_threshold(params, grad_max + lip_g, eta)
    consts = {"d": d, "k": k, "a": a, "R": R, "z0": z0.tolist(), "norm": N, "eta": eta, "T": T,
              "anchor": x0.tolist(), "grad_bound": grad_max, "eps_threshold": eps_bar}
    return Barrier(kind, func, consts, dt=dt)


def _band_box(domain, width):
    lo, hi = domain.bounds()
    return Box(tuple(lo - width), tuple(hi + width))


def _outer_normal(domain, x0):
    if isinstance(domain, Ball):
        n = x0 - np.array(domain.center)
        return n / np.linalg.norm(n)
    lo, hi = domain.bounds()
    gaps = np.concatenate([x0 - lo, hi - x0])
    i = int(np.argmin(np.abs(gaps)))
    n = np.zeros(domain.d)
    n[i % domain.d] = -1.0 if i < domain.d else 1.0
    return n


def _eps_threshold(params: Params, slope: float, eta: float) -> float:
    """Largest eps on a fine ladder with ``slope * band_width(eps) <= 3 eta / 8``."""
    best = 0.0
    for e in np.exp(np.linspace(math.log(0.999), math.log(1e-6), 400)):
        if slope * params.with_eps(float(e)).band_width <= 3 * eta / 8:
            best = float(e)
            break
    return best


@dataclass
class BarrierReport:
    ok: bool
    violations: int
    worst: float
    worst_node: tuple | None
    worst_step: int | None
    tolerance: float


def check_barrier_ordering(solution: SpaceTimeSolution, barrier: Barrier, sense: str = "below",
                           tol: float | None = None, region: str = "domain_and_band") -> BarrierReport:
    """Compare a barrier with the solution at every node of ``Omega`` (and the
    exterior band) and every recorded time."""
    if sense not in ("below", "above"):
        raise ValueError("sense must be 'below' or 'above'")
    scale = max(1.0, float(np.max(solution.sup_norms())))
    tol = 1e-6 * scale if tol is None else tol
    mask = solution.interior | solution.band if region == "domain_and_band" else np.ones_like(solution.interior)
    nodes = solution.fields[0].nodes()[mask]
    count, worst, where, when = 0, -math.inf, None, None
    for j, f in enumerate(solution.fields):
        w = barrier(nodes, j * solution.params.tau)
        u = f.values[mask]
        gap = w - u if sense == "below" else u - w
        k = int(np.argmax(gap))
        if gap[k] > worst:
            worst = float(gap[k])
            where = tuple(int(i) for i in np.argwhere(mask)[k])
            when = j
        count += int(np.sum(gap > tol))
    return BarrierReport(count == 0, count, worst, where, when, tol)


# ---------------------------------------------------------------------------
# regularity


@dataclass
class RegularityReport:
    translation: list
    translation_bound: float
    translation_violations: int
    sup_norms: list
    sup_bound: float
    sup_violations: int
    time_ratio_max: float
    interpolant_gap: list
    interpolant_gap_max: float
    lam: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def translation_differences(solution: SpaceTimeSolution, shift) -> np.ndarray:
    """``max_x |u^j(x + y) - u^j(x)|`` over lattice nodes for a lattice shift ``y``."""
    shift = tuple(int(s) for s in np.atleast_1d(shift))
    out = []
    for f in solution.fields:
        v = f.values
        src = tuple(slice(max(s, 0), v.shape[i] + min(s, 0)) for i, s in enumerate(shift))
        dst = tuple(slice(max(-s, 0), v.shape[i] + min(-s, 0)) for i, s in enumerate(shift))
        out.append(float(np.max(np.abs(v[src] - v[dst]))))
    return np.array(out)


def linear_interpolant(solution: SpaceTimeSolution, t: float) -> np.ndarray:
    tau = solution.params.tau
    j = min(int(math.floor(t / tau)), len(solution.fields) - 2)
    s = (t - j * tau) / tau
    return (1 - s) * solution.fields[j].values + s * solution.fields[j + 1].values


def left_constant_interpolant(solution: SpaceTimeSolution, t: float) -> np.ndarray:
    tau = solution.params.tau
    j = min(int(math.floor(t / tau + 1e-12)), len(solution.fields) - 1)
    return solution.fields[j].values


def regularity_report(solution: SpaceTimeSolution, shift=1, lam: float = 1.0, tol: float = 1e-12,
                      probe_times=None) -> RegularityReport:
    """Translation, sup-norm and time-regularity diagnostics of a whole-space run.

    ``shift`` is a lattice offset in nodes (an integer or one per axis).
    """
    arr = np.atleast_1d(np.asarray(shift))
    if not np.all(np.equal(np.mod(arr, 1), 0)):
        raise ValueError("shift must be a whole number of lattice cells")
    if arr.size == 1 and solution.params.d > 1:
        arr = np.concatenate([arr, np.zeros(solution.params.d - 1, dtype=int)])
    trans = translation_differences(solution, arr.astype(int))
    t_bound = float(trans[0])
    t_viol = int(np.sum(trans > t_bound + tol))
    norms = solution.sup_norms()
    s_bound = float(norms[0])
    s_viol = int(np.sum(norms > s_bound + tol))

    tau = solution.params.tau
    ratio = 0.0
    vals = [f.values for f in solution.fields]
    for k in range(len(vals)):
        for j in range(k + 1, len(vals)):
            dt = (j - k) * tau
            ratio = max(ratio, float(np.max(np.abs(vals[j] - vals[k]))) / dt ** (lam / 2))

    if probe_times is None:
        T = (len(vals) - 1) * tau
        probe_times = np.linspace(0, T, 4 * len(vals) + 1)[1:-1] + 0.37 * tau / 4
        probe_times = probe_times[probe_times < T]
    gaps = [float(np.max(np.abs(linear_interpolant(solution, t) - left_constant_interpolant(solution, t))))
            for t in probe_times]
    return RegularityReport(
        trans.tolist(), t_bound, t_viol, norms.tolist(), s_bound, s_viol, ratio,
        gaps, max(gaps) if gaps else 0.0, lam,
    )
