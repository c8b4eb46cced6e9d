"""The averaging operator ``A_eps`` and its asymptotic-expansion harness.

For a field ``phi`` and a point ``x``

    A_eps[phi](x) = 1/2 max[ min_c { alpha sup_{B_r(c)} phi + (1-alpha) M_rho(c)[phi] }, phi(x) ]
                  + 1/2 min[ max_c { alpha inf_{B_r(c)} phi + (1-alpha) M_rho(c)[phi] }, phi(x) ]

with ``r(c) = eps^2 c^(1-alpha)``, ``rho(c) = eps c^(-alpha/2)`` and ``c`` running
over a log-spaced grid of ``[m_eps, M_eps]``.  ``M_rho`` is the tug-of-war
with noise average over ``B_{gamma rho}(x)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Params, analytic_p_laplacian, signed_pow
from .field import (
    DEFAULT_SAMPLING,
    BallStencil,
    LatticeField,
    RadiusBelowResolution,
    SamplingSpec,
    ScalarField,
    ball_mean,
    ball_samples,
    stencil_stats,
)


class DegenerateFitError(ValueError):
    """Too few usable points for a log-log fit (errors at the noise floor)."""


# ---------------------------------------------------------------------------
# c grid


@dataclass(frozen=True)
class CGrid:
    """Log-uniform nodes covering ``[m_eps, M_eps]``."""

    nodes: tuple

    def __post_init__(self):
        arr = np.asarray(self.nodes, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("c grid must be a non-empty list")
        if np.any(np.diff(arr) <= 0) or arr[0] <= 0:
            raise ValueError("c grid must be positive and strictly increasing")
        object.__setattr__(self, "nodes", tuple(float(v) for v in arr))

    @classmethod
    def for_params(cls, params: Params, n: int = 48) -> CGrid:
        if n < 1:
            raise ValueError("c grid needs at least one node")
        if n == 1:
            return cls((math.sqrt(params.m_eps * params.M_eps),))
        nodes = np.exp(np.linspace(math.log(params.m_eps), math.log(params.M_eps), n))
        nodes[0], nodes[-1] = params.m_eps, params.M_eps
        return cls(tuple(nodes))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.nodes)

    def __len__(self):
        return len(self.nodes)

    def refined(self) -> CGrid:
        """Insert the geometric midpoint between neighbours (superset of nodes)."""
        a = self.array
        if a.size == 1:
            return self
        mids = np.sqrt(a[:-1] * a[1:])
        return CGrid(tuple(np.sort(np.concatenate([a, mids]))))


# ---------------------------------------------------------------------------
# pointwise operator


@dataclass
class OperatorDetail:
    """Everything one evaluation of ``A_eps`` computes."""

    value: float
    center: float
    upper: np.ndarray  # alpha sup_small + (1-alpha) M_rho, per c
    lower: np.ndarray  # alpha inf_small + (1-alpha) M_rho, per c
    first_branch: float
    second_branch: float
    fallbacks: int = 0


def m_rho(phi: ScalarField, x, rho: float, params: Params, sampling: SamplingSpec | None = None) -> float:
    """``beta/2 (sup + inf) + (1 - beta) mean`` over ``B_{gamma rho}(x)``."""
    radius = params.gamma * rho
    _, vals = ball_samples(phi, x, radius, sampling)
    mean = ball_mean(phi, x, radius, sampling)
    return params.beta / 2 * (float(vals.max()) + float(vals.min())) + (1 - params.beta) * mean


def _small_extremes(phi, x, r, sampling):
    try:
        _, vals = ball_samples(phi, x, r, sampling)
        fallback = False
    except RadiusBelowResolution:
        _, vals = ball_samples(phi, x, r, sampling, allow_subresolution=True)
        fallback = True
    return float(vals.max()), float(vals.min()), fallback


def a_eps_detail(phi: ScalarField, x, params: Params, cgrid: CGrid | None = None,
                 sampling: SamplingSpec | None = None) -> OperatorDetail:
    if cgrid is None:
        cgrid = CGrid.for_params(params)
    if len(cgrid) == 0:
        raise ValueError("empty c grid")
    sampling = sampling or DEFAULT_SAMPLING
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a = params.alpha
    upper = np.empty(len(cgrid))
    lower = np.empty(len(cgrid))
    fallbacks = 0
    for i, c in enumerate(cgrid.nodes):
        sup_s, inf_s, fb = _small_extremes(phi, x, float(params.small_radius(c)), sampling)
        fallbacks += fb
        m = m_rho(phi, x, float(params.tug_rho(c)), params, sampling)
        upper[i] = a * sup_s + (1 - a) * m
        lower[i] = a * inf_s + (1 - a) * m
    center = float(phi(x))
    first = float(upper.min())
    second = float(lower.max())
    # ties keep the inner branch value
    b1 = center if center > first else first
    b2 = center if center < second else second
    return OperatorDetail(0.5 * b1 + 0.5 * b2, center, upper, lower, first, second, fallbacks)


def a_eps(phi: ScalarField, x, params: Params, cgrid: CGrid | None = None,
          sampling: SamplingSpec | None = None) -> float:
    """Value of the averaging operator at ``x``."""
    return a_eps_detail(phi, x, params, cgrid, sampling).value


# ---------------------------------------------------------------------------
# whole-lattice operator


class LatticeOperator:
    """``A_eps`` at every node of a lattice, using node-centred stencils.

    The sample sets coincide with those of :func:`a_eps` at a node, so both
    paths agree up to summation order.  Values within ``margin`` nodes of
    the lattice edge are not meaningful.
    """

    def __init__(self, params: Params, h: float, cgrid: CGrid | None = None,
                 sampling: SamplingSpec | None = None):
        self.params = params
        self.h = float(h)
        self.cgrid = cgrid or CGrid.for_params(params)
        self.sampling = sampling or DEFAULT_SAMPLING
        d = params.d
        self.small = [BallStencil.build(float(params.small_radius(c)), h, d, self.sampling) for c in self.cgrid.nodes]
        self.tug = [BallStencil.build(float(params.tug_radius(c)), h, d, self.sampling) for c in self.cgrid.nodes]
        self.margin = max(s.half for s in self.small + self.tug) + 1
        self.fallbacks_per_node = sum(s.subresolution for s in self.small)

    def apply(self, values: np.ndarray) -> np.ndarray:
        prm = self.params
        a, b = prm.alpha, prm.beta
        pad = self.margin + 1
        padded = np.pad(values, pad, mode="edge")
        first = np.full(values.shape, np.inf)
        second = np.full(values.shape, -np.inf)
        for small, tug in zip(self.small, self.tug):
            ss, si, _ = stencil_stats(values, small, padded, pad, mean=False)
            ts, ti, tm = stencil_stats(values, tug, padded, pad)
            m = b / 2 * (ts + ti) + (1 - b) * tm
            np.minimum(first, a * ss + (1 - a) * m, out=first)
            np.maximum(second, a * si + (1 - a) * m, out=second)
        b1 = np.where(values > first, values, first)
        b2 = np.where(values < second, values, second)
        return 0.5 * b1 + 0.5 * b2

    def __call__(self, u: LatticeField) -> LatticeField:
        if abs(u.h - self.h) > 1e-15 * self.h:
            raise ValueError("lattice cell size does not match the operator")
        return u.with_values(self.apply(u.values))


# ---------------------------------------------------------------------------
# expansion harness


def expansion_error(phi, x, params: Params, cgrid: CGrid | None = None,
                    sampling: SamplingSpec | None = None) -> float:
    """``(A_eps[phi](x) - phi(x)) 2/eps^2 - (Delta_p phi(x))^(1/(p-1))``."""
    lap = analytic_p_laplacian(phi, x, params)
    value = a_eps(phi, x, params, cgrid, sampling)
    return (value - float(phi(x))) * 2 / params.eps**2 - signed_pow(lap, 1 / (params.p - 1))


def expansion_quotient(phi, x, params: Params, cgrid: CGrid | None = None,
                       sampling: SamplingSpec | None = None) -> float:
    """``(A_eps[phi](x) - phi(x)) 2/eps^2``."""
    value = a_eps(phi, x, params, cgrid, sampling)
    return (value - float(phi(x))) * 2 / params.eps**2


def parabolic_expansion_error(phi_at: Callable[[float], ScalarField], dphi_dt: Callable, x, t: float,
                              params: Params, cgrid: CGrid | None = None,
                              sampling: SamplingSpec | None = None) -> float:
    """``(phi(x, t+tau) - A_eps[phi(., t)](x)) / tau - (d_t phi - (Delta_p phi)^(1/(p-1)))``.

    ``phi_at(t)`` returns the spatial slice at time ``t`` and ``dphi_dt(x, t)``
    the time derivative.  The operator acts in space only; the time shift is
    the explicit Taylor term.
    """
    tau = params.tau
    slice_t = phi_at(t)
    lap = analytic_p_laplacian(slice_t, x, params)
    quotient = (float(phi_at(t + tau)(x)) - a_eps(slice_t, x, params, cgrid, sampling)) / tau
    return quotient - (float(dphi_dt(x, t)) - signed_pow(lap, 1 / (params.p - 1)))


def reference_slope(p: float) -> float:
    return min(2 - 4 / p, 2 / (3 * p - 4))


@dataclass
class ExpansionReport:
    eps: list
    errors: list
    slope: float
    reference_slope: float
    notes: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eps", "abs_error"])
            for e, err in zip(self.eps, self.errors):
                w.writerow([repr(float(e)), repr(abs(float(err)))])
            w.writerow(["slope", "reference_slope"])
            w.writerow([repr(float(self.slope)), repr(float(self.reference_slope))])

    def as_dict(self) -> dict:
        return {
            "eps": [float(e) for e in self.eps],
            "abs_error": [abs(float(e)) for e in self.errors],
            "slope": float(self.slope),
            "reference_slope": float(self.reference_slope),
            "notes": list(self.notes),
        }


def order_fit(eps: Sequence[float], errors: Sequence[float], p: float = 3.0,
              floor: float = 1e-13) -> ExpansionReport:
    """Least-squares slope of ``log|E|`` against ``log eps``."""
    eps = np.asarray(eps, dtype=float)
    errs = np.abs(np.asarray(errors, dtype=float))
    if eps.size != errs.size:
        raise ValueError("ladder and errors differ in length")
    if eps.size < 3:
        raise ValueError("need at least three ladder points")
    if np.any(np.diff(eps) >= 0):
        raise ValueError("eps ladder must be strictly decreasing")
    if not np.all(np.isfinite(errs)):
        raise ValueError("errors must be finite")
    keep = errs > floor
    notes = [f"excluded eps={e:g} (error at noise floor)" for e in eps[~keep]]
    if keep.sum() < 3:
        raise DegenerateFitError("fewer than three errors above the noise floor")
    slope = float(np.polyfit(np.log(eps[keep]), np.log(errs[keep]), 1)[0])
    return ExpansionReport(list(eps), list(errs), slope, reference_slope(p), notes)


def expansion_report(phi, x, d: int, p: float, ladder: Sequence[float], n_c: int = 48,
                     sampling: SamplingSpec | None = None) -> ExpansionReport:
    """Run :func:`expansion_error` along an eps ladder and fit the order."""
    errors = []
    for e in ladder:
        prm = Params(d, p, e)
        errors.append(expansion_error(phi, x, prm, CGrid.for_params(prm, n_c), sampling))
    return order_fit(ladder, errors, p)
