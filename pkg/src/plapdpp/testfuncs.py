"""Registry of analytic test functions with gradients, Hessians and, where
known, closed-form p-Laplacians.

Every factory has the signature ``factory(d, p, **kwargs) -> AnalyticField``;
``p`` is only used by the families whose exponent depends on it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import p_laplacian_radial
from .field import AnalyticField


def _vec(v, d, default=0.0):
    if v is None:
        return np.full(d, float(default))
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.size == 1 and d > 1:
        arr = np.full(d, float(arr[0]))
    if arr.size != d:
        raise ValueError(f"expected {d} components, got {arr.size}")
    return arr


def constant(d: int, p: float = 3.0, value: float = 0.0) -> AnalyticField:
    value = float(value)
    return AnalyticField(
        d,
        lambda x: np.full(len(x), value),
        lambda x: np.zeros(d),
        lambda x: np.zeros((d, d)),
        lambda x, prm: 0.0,
        name=f"constant({value})",
    )


def affine(d: int, p: float = 3.0, a=1.0, b: float = 0.0) -> AnalyticField:
    a = _vec(a, d, 1.0)
    b = float(b)
    return AnalyticField(
        d,
        lambda x: x @ a + b,
        lambda x: a.copy(),
        lambda x: np.zeros((d, d)),
        lambda x, prm: 0.0,
        name="affine",
    )


def quadratic(d: int, p: float = 3.0, a=1.0, z=None) -> AnalyticField:
    """``sum_i a_i (x_i - z_i)^2``."""
    a = _vec(a, d, 1.0)
    z = _vec(z, d)
    return AnalyticField(
        d,
        lambda x: ((x - z) ** 2) @ a,
        lambda x: 2 * a * (np.asarray(x) - z),
        lambda x: np.diag(2 * a),
        None,
        name="quadratic",
    )


def exponential(d: int, p: float = 3.0, a=1.0, scale: float = 1.0) -> AnalyticField:
    """``scale * exp(<a, x>)``; its p-Laplacian is
    ``(p-1) |a|^p scale^(p-1) exp((p-1) <a, x>)`` for ``scale > 0``."""
    a = _vec(a, d, 1.0)
    scale = float(scale)
    na = float(np.linalg.norm(a))

    def plap(x, prm):
        e = scale * np.exp(np.asarray(x) @ a)
        return float(np.sign(e) * (prm.p - 1) * na**prm.p * abs(e) ** (prm.p - 1))

    return AnalyticField(
        d,
        lambda x: scale * np.exp(x @ a),
        lambda x: scale * np.exp(np.asarray(x) @ a) * a,
        lambda x: scale * np.exp(np.asarray(x) @ a) * np.outer(a, a),
        plap,
        name="exp",
    )


def _radial(d, z, q, scale, kind, name):
    z = _vec(z, d)

    def func(x):
        return scale * np.linalg.norm(x - z, axis=1) ** q

    def grad(x):
        y = np.asarray(x, dtype=float) - z
        r = np.linalg.norm(y)
        if r == 0:
            if q > 1:
                return np.zeros(d)
            raise ValueError("gradient undefined at the centre")
        return scale * q * r ** (q - 2) * y

    def hess(x):
        y = np.asarray(x, dtype=float) - z
        r = np.linalg.norm(y)
        if r == 0:
            if q > 2:
                return np.zeros((d, d))
            raise ValueError("Hessian undefined at the centre")
        n = y / r
        return scale * q * r ** (q - 2) * (np.eye(d) + (q - 2) * np.outer(n, n))

    def plap(x, prm):
        r = float(np.linalg.norm(np.asarray(x, dtype=float) - z))
        base = p_laplacian_radial(kind, abs(q), r, prm)
        return float(np.sign(scale) * abs(scale) ** (prm.p - 1) * base)

    return AnalyticField(d, func, grad, hess, plap, name=name)


def neg_power_exponent(d: int, p: float) -> float:
    return (p + d - 2) / (p - 1)


def pos_power_exponent(p: float) -> float:
    return (3 * p - 2) / (p - 1)


def neg_power(d: int, p: float = 3.0, z=None, scale: float = 1.0) -> AnalyticField:
    """``scale * |x - z|^(-(p+d-2)/(p-1))``, singular at ``z``."""
    a = neg_power_exponent(d, p)
    return _radial(d, z, -a, float(scale), "neg_power", "neg_power")


def pos_power(d: int, p: float = 3.0, z=None, scale: float = 1.0) -> AnalyticField:
    """``scale * |x - z|^((3p-2)/(p-1))``; ``C^2`` with a critical point at ``z``."""
    b = pos_power_exponent(p)
    return _radial(d, z, b, float(scale), "pos_power", "pos_power")


def radial_power(d: int, p: float = 3.0, z=None, exponent: float = 3.5, scale: float = 1.0) -> AnalyticField:
    """``scale * |x - z|^exponent`` with ``exponent > 0``."""
    return _radial(d, z, float(exponent), float(scale), "pos_power", f"radial_power({exponent})")


def bump(d: int, p: float = 3.0, z=None, height: float = 1.0) -> AnalyticField:
    """Lipschitz bump ``height * max(0, 1 - |x - z|)``; no p-Laplacian."""
    z = _vec(z, d)
    height = float(height)

    def grad(x):
        y = np.asarray(x, dtype=float) - z
        r = np.linalg.norm(y)
        if r == 0 or r >= 1:
            return np.zeros(d)
        return -height * y / r

    def hess(x):
        y = np.asarray(x, dtype=float) - z
        r = np.linalg.norm(y)
        if r == 0 or r >= 1:
            return np.zeros((d, d))
        n = y / r
        return -height * (np.eye(d) - np.outer(n, n)) / r

    return AnalyticField(
        d,
        lambda x: height * np.maximum(0.0, 1 - np.linalg.norm(x - z, axis=1)),
        grad,
        hess,
        None,
        name="bump",
    )


def gaussian(d: int, p: float = 3.0, z=None, height: float = 1.0, width: float = 0.5) -> AnalyticField:
    """``height * exp(-|x - z|^2 / (2 width^2))``."""
    z = _vec(z, d)
    height, width = float(height), float(width)
    s2 = width**2

    def value(y):
        return height * np.exp(-(y @ y) / (2 * s2))

    def grad(x):
        y = np.asarray(x, dtype=float) - z
        return -value(y) * y / s2

    def hess(x):
        y = np.asarray(x, dtype=float) - z
        return value(y) * (np.outer(y, y) / s2**2 - np.eye(d) / s2)

    return AnalyticField(
        d,
        lambda x: height * np.exp(-np.sum((x - z) ** 2, axis=1) / (2 * s2)),
        grad,
        hess,
        None,
        name="gaussian",
    )


def cosine(d: int, p: float = 3.0, k: float = np.pi / 2, height: float = 1.0) -> AnalyticField:
    """``height * prod_i cos(k x_i)``; vanishes on the faces of ``[-pi/(2k), pi/(2k)]^d``."""
    k, height = float(k), float(height)

    def grad(x):
        x = np.asarray(x, dtype=float)
        c, s = np.cos(k * x), np.sin(k * x)
        return np.array([-height * k * s[i] * np.prod(np.delete(c, i)) for i in range(d)])

    def hess(x):
        x = np.asarray(x, dtype=float)
        c, s = np.cos(k * x), np.sin(k * x)
        out = np.empty((d, d))
        for i in range(d):
            for j in range(d):
                if i == j:
                    out[i, j] = -height * k**2 * np.prod(c)
                else:
                    rest = np.prod(np.delete(c, [i, j]))
                    out[i, j] = height * k**2 * s[i] * s[j] * rest
        return out

    return AnalyticField(
        d,
        lambda x: height * np.prod(np.cos(k * x), axis=1),
        grad,
        hess,
        None,
        name="cosine",
    )


@dataclass(frozen=True)
class RegisteredFunction:
    name: str
    factory: Callable[..., AnalyticField]
    description: str


REGISTRY: dict[str, RegisteredFunction] = {
    tf.name: tf
    for tf in [
        RegisteredFunction("constant", constant, "value (default 0)"),
        RegisteredFunction("affine", affine, "<a, x> + b"),
        RegisteredFunction("quadratic", quadratic, "sum_i a_i (x_i - z_i)^2"),
        RegisteredFunction("exp", exponential, "scale * exp(<a, x>)"),
        RegisteredFunction("neg_power", neg_power, "scale * |x - z|^(-(p+d-2)/(p-1))"),
        RegisteredFunction("pos_power", pos_power, "scale * |x - z|^((3p-2)/(p-1))"),
        RegisteredFunction("radial_power", radial_power, "scale * |x - z|^exponent"),
        RegisteredFunction("bump", bump, "height * max(0, 1 - |x - z|)"),
        RegisteredFunction("gaussian", gaussian, "height * exp(-|x - z|^2 / (2 width^2))"),
        RegisteredFunction("cosine", cosine, "height * prod_i cos(k x_i)"),
    ]
}


def make(name: str, d: int, p: float = 3.0, **kwargs) -> AnalyticField:
    """Instantiate a registered test function."""
    try:
        entry = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown test function {name!r}; known: {', '.join(sorted(REGISTRY))}") from None
    return entry.factory(d, p, **kwargs)

