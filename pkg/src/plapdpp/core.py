"""Problem parameters, signed powers, the geometric-mean identity and
closed-form p-Laplacians used as verification oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .field import AnalyticField


class CriticalPointError(ValueError):
    """The gradient vanishes and no closed form or bound settles the value."""


@dataclass(frozen=True)
class Params:
    """Dimension ``d``, exponent ``p`` and scale ``eps`` plus every derived
    constant of the averaging operator.

    ``band_width`` is the exterior layer on which comparison of exterior
    data suffices; ``reach`` is the largest ball radius the operator ever
    queries (it includes the factor ``gamma`` on the tug-of-war balls and is
    what a lattice must be padded by).
    """

    d: int
    p: float
    eps: float
    alpha: float = field(init=False)
    beta: float = field(init=False)
    gamma: float = field(init=False)
    tau: float = field(init=False)
    m_eps: float = field(init=False)
    M_eps: float = field(init=False)
    band_width: float = field(init=False)
    reach: float = field(init=False)

    def __post_init__(self):
        d, p, eps = int(self.d), float(self.p), float(self.eps)
        if d < 1:
            raise ValueError(f"dimension must be >= 1, got {self.d}")
        if not p > 2:
            raise ValueError(f"exponent p must exceed 2, got {self.p}")
        if not 0 < eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        alpha = (p - 2) / (p - 1)
        m = eps ** (2 * (p - 1) / (3 * p - 4))
        M = eps ** (-2 + 2 / p)
        gamma = math.sqrt(2 * (p + d))
        values = dict(
            d=d,
            p=p,
            eps=eps,
            alpha=alpha,
            beta=(p - 2) / (p + d),
            gamma=gamma,
            tau=eps**2 / 2,
            m_eps=m,
            M_eps=M,
            band_width=max(eps**2 * M ** (1 - alpha), eps * m ** (-alpha / 2)),
            reach=max(eps**2 * M ** (1 - alpha), gamma * eps * m ** (-alpha / 2)),
        )
        for key, value in values.items():
            object.__setattr__(self, key, value)

    def small_radius(self, c):
        """Radius of the ball on which the mover picks freely."""
        return self.eps**2 * np.power(c, 1 - self.alpha)

    def tug_rho(self, c):
        """Scale ``rho`` handed to the normalized p-Laplacian average."""
        return self.eps * np.power(c, -self.alpha / 2)

    def tug_radius(self, c):
        return self.gamma * self.tug_rho(c)

    def with_eps(self, eps: float) -> Params:
        return Params(self.d, self.p, eps)

    def as_dict(self) -> dict:
        return {
            "d": self.d,
            "p": self.p,
            "eps": self.eps,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "tau": self.tau,
            "m_eps": self.m_eps,
            "M_eps": self.M_eps,
            "band_width": self.band_width,
            "reach": self.reach,
        }


def signed_pow(a, q):
    """``sgn(a) * |a|**q``; works elementwise on arrays."""
    if not q > 0:
        raise ValueError(f"exponent must be positive, got {q}")
    a = np.asarray(a, dtype=float)
    out = np.sign(a) * np.abs(a) ** q
    return float(out) if out.ndim == 0 else out


def _arith_mean(c, a, b, alpha):
    # alpha c^(1-alpha) a + (1-alpha) c^(-alpha) b with the limits c->0, c->inf
    if c == 0.0:
        return 0.0 if b == 0 else math.inf
    if math.isinf(c):
        return 0.0 if a == 0 else math.inf
    return alpha * c ** (1 - alpha) * a + (1 - alpha) * c ** (-alpha) * b


def geometric_mean_inf(a: float, b: float, alpha: float, m: float = 0.0, M: float = math.inf) -> float:
    """Infimum over ``c in [m, M]`` of ``alpha c^(1-alpha) a + (1-alpha) c^(-alpha) b``.

    The objective decreases for ``c < b/a`` and increases afterwards, so the
    infimum sits at the stationary point clamped to ``[m, M]``.  For
    ``m = 0, M = inf`` this is ``a**alpha * b**(1-alpha)``.
    """
    if a < 0 or b < 0:
        raise ValueError(f"a and b must be nonnegative, got a={a}, b={b}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not 0 <= m < M:
        raise ValueError(f"need 0 <= m < M, got m={m}, M={M}")
    if a == 0:
        c = M
    elif b == 0:
        c = m
    else:
        c = min(max(b / a, m), M)
    return _arith_mean(c, a, b, alpha)


def geometric_mean_inf_scan(
    a: float,
    b: float,
    alpha: float,
    m: float = 0.0,
    M: float = math.inf,
    n: int = 401,
    zooms: int = 6,
    span: float = 40.0,
) -> float:
    """Brute-force counterpart of :func:`geometric_mean_inf`.

    Scans a log-spaced grid of ``c`` and repeatedly zooms in on the best
    node.  Unbounded ends are replaced by ``exp(+-span)``.  Knows nothing about
    the stationary point.
    """
    lo = math.log(m) if m > 0 else -span
    hi = math.log(M) if math.isfinite(M) else span
    best = math.inf
    for _ in range(zooms):
        grid = np.exp(np.linspace(lo, hi, n))
        vals = alpha * grid ** (1 - alpha) * a + (1 - alpha) * grid ** (-alpha) * b
        i = int(np.argmin(vals))
        best = min(best, float(vals[i]))
        step = (hi - lo) / (n - 1)
        new_lo = max(lo, math.log(grid[i]) - 2 * step)
        new_hi = min(hi, math.log(grid[i]) + 2 * step)
        lo, hi = new_lo, new_hi
    # end points carry the m -> 0 / M -> inf limits
    if m == 0 and b == 0:
        best = min(best, 0.0)
    if math.isinf(M) and a == 0:
        best = min(best, 0.0)
    return best


def truncation_bound(a: float, b: float, alpha: float, m: float, M: float) -> float:
    """Upper bound on the excess of the truncated infimum over the geometric mean."""
    tail = 0.0 if math.isinf(M) else (1 - alpha) * b * M ** (-alpha)
    return alpha * a * m ** (1 - alpha) + tail


def p_laplacian_radial(kind: str, exponent: float, r, params: Params):
    """p-Laplacian of ``|x|**(-a)`` (``neg_power``) or ``|x|**b`` (``pos_power``)
    evaluated at radius ``r``."""
    p, d = params.p, params.d
    r = np.asarray(r, dtype=float)
    if exponent <= 0:
        raise ValueError("exponent must be positive")
    if kind == "neg_power":
        if np.any(r <= 0):
            raise ValueError("neg_power is singular at r = 0")
        a = exponent
        out = a ** (p - 1) * (a * (p - 1) + p - d) * r ** (-a * (p - 1) - p)
    elif kind == "pos_power":
        b = exponent
        power = b * (p - 1) - p
        if np.any(r < 0):
            raise ValueError("radius must be nonnegative")
        if np.any(r == 0) and power <= 0:
            raise ValueError(f"pos_power with exponent {b} has no finite value at r = 0")
        out = b ** (p - 1) * (b * (p - 1) + d - p) * np.where(r == 0, 0.0, r) ** power
    else:
        raise ValueError(f"unknown radial family {kind!r}")
    return float(out) if out.ndim == 0 else out


def analytic_p_laplacian(phi: AnalyticField, x, params: Params) -> float:
    """``|grad|^(p-2) (lap + (p-2) <D^2 n, n>)`` from the analytic derivatives of ``phi``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = params.p
    if phi.plap is not None:
        closed = phi.plap(x, params)
    else:
        closed = None
    grad = np.asarray(phi.gradient(x), dtype=float).reshape(-1)
    hess = np.asarray(phi.hessian(x), dtype=float).reshape(grad.size, grad.size)
    norm = float(np.linalg.norm(grad))
    scale = 1.0 + abs(float(phi(x)))
    if norm <= 1e-12 * scale:
        if closed is not None:
            return float(closed)
        # |Delta_p phi| <= (p-1) |grad|^(p-2) |D^2 phi|
        bound = (p - 1) * norm ** (p - 2) * float(np.linalg.norm(hess, 2))
        if bound <= 1e-12:
            return 0.0
        raise CriticalPointError(f"gradient vanishes at {x} and no closed form is known")
    n = grad / norm
    normalized = np.trace(hess) + (p - 2) * float(n @ hess @ n)
    return float(norm ** (p - 2) * normalized)
