"""Monte Carlo simulation of the tug-of-war game whose value is the DPP solution.

One round from position ``x`` at time ``t``:

1. a fair coin picks the mover, who either stays or plays;
2. if the mover plays, the opponent picks ``c in [m_eps, M_eps]``;
3. with probability ``alpha`` the mover puts the token anywhere in
   ``B_{eps^2 c^(1-alpha)}(x)``;
4. otherwise, with probability ``beta`` a fair coin picks which player puts the
   token anywhere in ``B_{gamma eps c^(-alpha/2)}(x)``, and with probability
   ``1 - beta`` the token lands uniformly in that ball.

Time drops by ``tau`` every round.  The game stops when the token leaves the
domain (payoff ``g``) or time is exhausted (payoff ``u0``).

Episodes run in lockstep batches.  Each episode owns a counter-based Philox
stream keyed by ``(seed, episode)`` and pre-draws one row of uniforms per
round in a fixed slot order: fair coin, alpha coin, beta coin, tug coin,
``d + 1`` uniforms for the noise draw, then auxiliary draws for player I and
player II.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .amvf import CGrid
from .core import Params
from .dpp import SpaceTimeSolution
from .field import (
    DEFAULT_SAMPLING,
    LatticeField,
    OutsideDefinitionRegion,
    SamplingSpec,
    ScalarField,
    ball_mean,
    ball_samples,
)

BRANCHES = ("stay", "heads", "tug_I", "tug_II", "noise")
STAY, HEADS, TUG_I, TUG_II, NOISE = range(5)


# ---------------------------------------------------------------------------
# value oracles: sup / inf / argmax / mean of an interpolated lattice field


class IntervalOracle:
    """Vectorized ball queries on a 1-d lattice field.

    Uses the sample set of :func:`ball_samples` (centre, nodes strictly
    inside, both end points), so the supremum is exact for the
    piecewise-linear interpolant.  Means integrate the interpolant exactly.
    """

    def __init__(self, fld: LatticeField):
        if fld.d != 1:
            raise ValueError("interval oracle needs a 1-d lattice")
        self.field = fld
        v = fld.values
        self.v = v
        self.n = v.size
        self.h = fld.h
        self.origin = float(fld.origin[0])
        self.max_tab, self.max_idx = self._table(v, np.maximum, np.greater_equal)
        self.min_tab, self.min_idx = self._table(v, np.minimum, np.less_equal)
        cells = self.h * (v[:-1] + v[1:]) / 2
        self.cum = np.concatenate([[0.0], np.cumsum(cells)])

    @staticmethod
    def _table(v, pick, better):
        tabs, idxs = [v], [np.arange(v.size)]
        span = 1
        while 2 * span <= v.size:
            a, b = tabs[-1][:-span], tabs[-1][span:]
            ia, ib = idxs[-1][:-span], idxs[-1][span:]
            keep = better(a, b)
            tabs.append(np.where(keep, a, b))
            idxs.append(np.where(keep, ia, ib))
            span *= 2
        return tabs, idxs

    def _range(self, lo, hi, tabs, idxs, fill, better):
        empty = lo > hi
        lo_c = np.where(empty, 0, lo)
        hi_c = np.where(empty, 0, hi)
        length = hi_c - lo_c + 1
        lev = np.floor(np.log2(length)).astype(int)
        val = np.full(lo.shape, fill)
        arg = np.zeros(lo.shape, dtype=int)
        for k in np.unique(lev):
            sel = lev == k
            a = lo_c[sel]
            b = hi_c[sel] - (1 << k) + 1
            va, vb = tabs[k][a], tabs[k][b]
            keep = better(va, vb)
            val[sel] = np.where(keep, va, vb)
            arg[sel] = np.where(keep, idxs[k][a], idxs[k][b])
        val[empty] = fill
        return val, arg

    def index(self, x) -> np.ndarray:
        ci = (np.asarray(x, dtype=float) - self.origin) / self.h
        near = np.round(ci)
        return np.where(np.abs(ci - near) < 1e-9, near, ci)

    def interp_index(self, s) -> np.ndarray:
        k = np.clip(np.floor(s), 0, self.n - 2).astype(int)
        f = s - k
        return self.v[k] + f * (self.v[k + 1] - self.v[k])

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        s = self.index(x)
        if np.any(s < -1e-9) or np.any(s > self.n - 1 + 1e-9):
            raise OutsideDefinitionRegion("query outside the lattice")
        return self.interp_index(np.clip(s, 0, self.n - 1))

    def _check(self, ci, rh):
        if np.any(ci - rh < -1e-9) or np.any(ci + rh > self.n - 1 + 1e-9):
            raise OutsideDefinitionRegion("ball leaves the lattice")

    def extremes(self, x, radii):
        """Sampled sup / inf and their locations.

        ``x`` has shape ``(n, 1)`` or ``(n,)``; ``radii`` has shape ``(n, m)``.
        Returns ``sup, inf, argsup, arginf`` each of shape ``(n, m)``.
        """
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        radii = np.asarray(radii, dtype=float)
        ci = self.index(x)
        rh = radii / self.h
        self._check(ci, rh)
        a = np.clip(ci - rh, 0, self.n - 1)
        b = np.clip(ci + rh, 0, self.n - 1)
        lo = np.clip(np.floor(ci - rh).astype(int) + 1, 0, self.n - 1)
        hi = np.clip(np.ceil(ci + rh).astype(int) - 1, 0, self.n - 1)
        nmax, imax = self._range(lo, hi, self.max_tab, self.max_idx, -np.inf, np.greater_equal)
        nmin, imin = self._range(lo, hi, self.min_tab, self.min_idx, np.inf, np.less_equal)
        vc = np.broadcast_to(self.interp_index(np.clip(ci, 0, self.n - 1)), rh.shape)
        va, vb = self.interp_index(a), self.interp_index(b)
        cand_v = np.stack([vc, np.broadcast_to(nmax, rh.shape), va, vb])
        cand_s = np.stack([np.broadcast_to(ci, rh.shape), imax.astype(float), a, b])
        k = np.argmax(cand_v, axis=0)
        sup = np.take_along_axis(cand_v, k[None], 0)[0]
        s_sup = np.take_along_axis(cand_s, k[None], 0)[0]
        cand_v[1] = nmin
        cand_s[1] = imin
        k = np.argmin(cand_v, axis=0)
        inf = np.take_along_axis(cand_v, k[None], 0)[0]
        s_inf = np.take_along_axis(cand_s, k[None], 0)[0]
        return sup, inf, self.origin + self.h * s_sup, self.origin + self.h * s_inf

    def _primitive(self, s):
        k = np.clip(np.floor(s), 0, self.n - 2).astype(int)
        f = s - k
        vk = self.v[k]
        return self.cum[k] + self.h * (vk * f + (self.v[k + 1] - vk) * f * f / 2)

    def means(self, x, radii):
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        radii = np.asarray(radii, dtype=float)
        ci = self.index(x)
        rh = radii / self.h
        self._check(ci, rh)
        a = np.clip(ci - rh, 0, self.n - 1)
        b = np.clip(ci + rh, 0, self.n - 1)
        return (self._primitive(b) - self._primitive(a)) / (2 * radii)


class SampledOracle:
    """Ball queries for any dimension by looping over :func:`ball_samples`."""

    def __init__(self, fld: ScalarField, sampling: SamplingSpec | None = None):
        self.field = fld
        self.sampling = sampling or DEFAULT_SAMPLING

    def value(self, x):
        return np.asarray(self.field(np.asarray(x, dtype=float).reshape(-1, self.field.d)))

    def extremes(self, x, radii):
        x = np.asarray(x, dtype=float).reshape(-1, self.field.d)
        radii = np.asarray(radii, dtype=float)
        n, m = radii.shape
        d = self.field.d
        sup = np.empty((n, m))
        inf = np.empty((n, m))
        asup = np.empty((n, m, d))
        ainf = np.empty((n, m, d))
        for i in range(n):
            for j in range(m):
                pts, vals = ball_samples(self.field, x[i], radii[i, j], self.sampling, allow_subresolution=True)
                a, b = int(np.argmax(vals)), int(np.argmin(vals))
                sup[i, j], inf[i, j] = vals[a], vals[b]
                asup[i, j], ainf[i, j] = pts[a], pts[b]
        if d == 1:
            return sup, inf, asup[..., 0], ainf[..., 0]
        return sup, inf, asup, ainf

    def means(self, x, radii):
        x = np.asarray(x, dtype=float).reshape(-1, self.field.d)
        radii = np.asarray(radii, dtype=float)
        out = np.empty(radii.shape)
        for i in range(radii.shape[0]):
            for j in range(radii.shape[1]):
                out[i, j] = ball_mean(self.field, x[i], radii[i, j], self.sampling)
        return out


def make_oracle(fld: ScalarField, sampling: SamplingSpec | None = None):
    if isinstance(fld, LatticeField) and fld.d == 1:
        return IntervalOracle(fld)
    return SampledOracle(fld, sampling)


def operator_objectives(oracle, x, params: Params, cgrid: CGrid):
    """Per-``c`` heads objective ``F``, tails objective ``G`` and centre values."""
    cs = cgrid.array[None, :]
    n = np.asarray(x).reshape(len(x), -1).shape[0]
    r_small = np.broadcast_to(params.small_radius(cs), (n, cs.size))
    r_tug = np.broadcast_to(params.tug_radius(cs), (n, cs.size))
    ss, si, _, _ = oracle.extremes(x, r_small)
    ts, ti, _, _ = oracle.extremes(x, r_tug)
    tm = oracle.means(x, r_tug)
    a, b = params.alpha, params.beta
    m = b / 2 * (ts + ti) + (1 - b) * tm
    return a * ss + (1 - a) * m, a * si + (1 - a) * m, oracle.value(x)


def operator_at(oracle, x, params: Params, cgrid: CGrid) -> np.ndarray:
    """``A_eps`` of the oracle's field at arbitrary points."""
    F, G, v = operator_objectives(oracle, x, params, cgrid)
    first, second = F.min(axis=1), G.max(axis=1)
    return 0.5 * np.where(v > first, v, first) + 0.5 * np.where(v < second, v, second)


# ---------------------------------------------------------------------------
# game setup, state and round context


@dataclass
class GameSetup:
    """Static data of a game: parameters, payoff data and geometry.

    ``whole_space`` disables the spatial exit test; the game then ends only
    when time is exhausted.
    """

    params: Params
    u0: ScalarField
    g: ScalarField
    domain: object = None
    whole_space: bool = False
    cgrid: CGrid | None = None
    sampling: SamplingSpec | None = None

    def __post_init__(self):
        if self.cgrid is None:
            self.cgrid = CGrid.for_params(self.params)
        if self.domain is None and not self.whole_space:
            raise ValueError("bounded games need a domain")

    @property
    def slots(self) -> int:
        return 4 + (self.params.d + 1) + 2 * self.aux_slots

    @property
    def aux_slots(self) -> int:
        return self.params.d + 3

    def inside(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.params.d)
        if self.whole_space:
            return np.ones(len(x), dtype=bool)
        return self.domain.contains(x)

    def rounds_for(self, t0: float) -> int:
        return int(math.ceil(t0 / self.params.tau - 1e-9))


@dataclass
class GameState:
    x: np.ndarray
    t: float
    k: int = 0
    terminated: bool = False
    payoff: float | None = None


class RoundContext:
    """What strategies see during one lockstep round."""

    def __init__(self, setup: GameSetup, k: int, remaining: int, x: np.ndarray, draws: np.ndarray):
        self.setup = setup
        self.params = setup.params
        self.cgrid = setup.cgrid
        self.k = k
        self.remaining = remaining
        self.next_index = remaining - 1
        self.t = remaining * setup.params.tau
        self.x = x
        self.draws = draws
        self.violations = 0
        self._cache = {}

    def aux(self, role: str) -> np.ndarray:
        d = self.params.d
        base = 4 + (d + 1) + (0 if role == "I" else self.setup.aux_slots)
        return self.draws[:, base : base + self.setup.aux_slots]

    def oracle(self, solution: SpaceTimeSolution):
        key = ("oracle", id(solution))
        if key not in self._cache:
            if self.next_index >= len(solution.fields):
                raise ValueError("game horizon exceeds the solution horizon")
            self._cache[key] = make_oracle(solution.fields[self.next_index], self.setup.sampling)
        return self._cache[key]

    def objectives(self, solution: SpaceTimeSolution, cgrid: CGrid):
        key = ("obj", id(solution), id(cgrid))
        if key not in self._cache:
            self._cache[key] = operator_objectives(self.oracle(solution), self.x, self.params, cgrid)
        return self._cache[key]


# ---------------------------------------------------------------------------
# strategies


class Strategy:
    """Decision rules for one player, vectorized over the rows of a round.

    ``stay_or_play`` returns True to stay.  ``pick_c`` is called when the
    *opponent* plays.  Point pickers return positions of shape ``(n, d)``.
    """

    name = "strategy"

    def __init__(self, role: str):
        if role not in ("I", "II"):
            raise ValueError("role must be 'I' or 'II'")
        self.role = role

    def stay_or_play(self, ctx: RoundContext, rows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pick_c(self, ctx: RoundContext, rows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pick_small_ball_point(self, ctx: RoundContext, rows: np.ndarray, c: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pick_tug_point(self, ctx: RoundContext, rows: np.ndarray, c: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _middle_c(params: Params) -> float:
    return math.sqrt(params.m_eps * params.M_eps)


def _uniform_in_ball(u: np.ndarray, d: int) -> np.ndarray:
    """Map ``d + 1`` uniforms per row to a uniform point of the unit ball."""
    if d == 1:
        return (2 * u[:, :1] - 1)
    g = ndtri(np.clip(u[:, :d], 1e-300, 1 - 1e-16))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * u[:, d : d + 1] ** (1 / d)


class DPPGreedyStrategy(Strategy):
    """Greedy play against the DPP value ``u_eps(., t_{k+1})``.

    Player I stays iff the current value exceeds the heads value the
    opponent can force, maximizes the tails objective when choosing ``c`` and
    moves to the sampled argmax.  Player II mirrors with minima.  Choices are
    exact over the sampled sets and the c grid, so the slack ``eta / 2^(k+1)``
    allowed by the value argument is never used.
    """

    name = "greedy"

    def __init__(self, solution: SpaceTimeSolution, role: str, eta: float = 1e-3, cgrid: CGrid | None = None):
        super().__init__(role)
        if not eta > 0:
            raise ValueError("eta must be positive")
        self.solution = solution
        self.eta = eta
        self.cgrid = cgrid

    def _check(self, ctx):
        sp, gp = self.solution.params, ctx.params
        if (sp.d, sp.p, sp.eps) != (gp.d, gp.p, gp.eps):
            raise ValueError("solution and game use different parameters")

    def _grid(self, ctx):
        return self.cgrid or ctx.cgrid

    def stay_or_play(self, ctx, rows):
        self._check(ctx)
        F, G, v = ctx.objectives(self.solution, self._grid(ctx))
        if self.role == "I":
            return v[rows] > F[rows].min(axis=1)
        return v[rows] < G[rows].max(axis=1)

    def pick_c(self, ctx, rows):
        self._check(ctx)
        grid = self._grid(ctx)
        F, G, _ = ctx.objectives(self.solution, grid)
        idx = np.argmax(G[rows], axis=1) if self.role == "I" else np.argmin(F[rows], axis=1)
        return grid.array[idx]

    def _extreme(self, ctx, rows, radius):
        oracle = ctx.oracle(self.solution)
        sup, inf, asup, ainf = oracle.extremes(ctx.x[rows], radius[:, None])
        pts = asup if self.role == "I" else ainf
        return np.asarray(pts).reshape(len(rows), ctx.params.d)

    def pick_small_ball_point(self, ctx, rows, c):
        return self._extreme(ctx, rows, ctx.params.small_radius(c))

    def pick_tug_point(self, ctx, rows, c):
        return self._extreme(ctx, rows, ctx.params.tug_radius(c))


def dpp_greedy_strategy(solution: SpaceTimeSolution, role: str, eta: float = 1e-3,
                        cgrid: CGrid | None = None) -> DPPGreedyStrategy:
    return DPPGreedyStrategy(solution, role, eta, cgrid)


class UniformRandomStrategy(Strategy):
    """Stays with probability 1/2, uniform node of the c grid, uniform points."""

    name = "uniform_random"

    def stay_or_play(self, ctx, rows):
        return ctx.aux(self.role)[rows, 0] < 0.5

    def pick_c(self, ctx, rows):
        # c nodes of the game's grid: the DPP value optimizes over the same grid
        u = ctx.aux(self.role)[rows, 1]
        grid = ctx.cgrid.array
        return grid[np.minimum((u * grid.size).astype(int), grid.size - 1)]

    def _point(self, ctx, rows, radius):
        u = ctx.aux(self.role)[rows, 2 : 2 + ctx.params.d + 1]
        return ctx.x[rows] + radius[:, None] * _uniform_in_ball(u, ctx.params.d)

    def pick_small_ball_point(self, ctx, rows, c):
        return self._point(ctx, rows, ctx.params.small_radius(c))

    def pick_tug_point(self, ctx, rows, c):
        return self._point(ctx, rows, ctx.params.tug_radius(c))


class AlwaysStayStrategy(Strategy):
    """Never plays; when forced to act, keeps the token at the centre."""

    name = "always_stay"

    def stay_or_play(self, ctx, rows):
        return np.ones(len(rows), dtype=bool)

    def pick_c(self, ctx, rows):
        return np.full(len(rows), _middle_c(ctx.params))

    def pick_small_ball_point(self, ctx, rows, c):
        return ctx.x[rows].copy()

    def pick_tug_point(self, ctx, rows, c):
        return ctx.x[rows].copy()


class CenterStayStrategy(AlwaysStayStrategy):
    """Always plays but keeps the token where it is; middle ``c``."""

    name = "center_stay"

    def stay_or_play(self, ctx, rows):
        return np.zeros(len(rows), dtype=bool)


class WorstSampledPointStrategy(Strategy):
    """Always plays with a random ``c`` and moves to the sampled extreme of
    ``u_eps`` that is worst for the opponent."""

    name = "worst_sampled_point"

    def __init__(self, solution: SpaceTimeSolution, role: str):
        super().__init__(role)
        self.solution = solution

    def stay_or_play(self, ctx, rows):
        return np.zeros(len(rows), dtype=bool)

    def pick_c(self, ctx, rows):
        return UniformRandomStrategy(self.role).pick_c(ctx, rows)

    def _extreme(self, ctx, rows, radius):
        sup, inf, asup, ainf = ctx.oracle(self.solution).extremes(ctx.x[rows], radius[:, None])
        pts = asup if self.role == "I" else ainf
        return np.asarray(pts).reshape(len(rows), ctx.params.d)

    def pick_small_ball_point(self, ctx, rows, c):
        return self._extreme(ctx, rows, ctx.params.small_radius(c))

    def pick_tug_point(self, ctx, rows, c):
        return self._extreme(ctx, rows, ctx.params.tug_radius(c))


def baseline_strategies(solution: SpaceTimeSolution, role: str) -> dict:
    return {
        "uniform_random": UniformRandomStrategy(role),
        "always_stay": AlwaysStayStrategy(role),
        "center_stay": CenterStayStrategy(role),
        "worst_sampled_point": WorstSampledPointStrategy(solution, role),
    }


# ---------------------------------------------------------------------------
# engine


def episode_stream(seed: int, episode: int) -> np.random.Generator:
    """Counter-based stream of one episode: Philox keyed by ``(seed, episode)``."""
    if not (0 <= seed < 2**64 and 0 <= episode < 2**64):
        raise ValueError("seed and episode index must fit in 64 bits")
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(episode)))


def draw_tables(seed: int, first: int, n: int, rounds: int, slots: int) -> np.ndarray:
    out = np.empty((n, max(rounds, 1), slots))
    for i in range(n):
        out[i] = episode_stream(seed, first + i).random((max(rounds, 1), slots))
    return out


def _clamp(points, centers, radius, ctx):
    off = points - centers
    norm = np.linalg.norm(off, axis=1)
    bad = norm > radius * (1 + 1e-12) + 1e-15
    if np.any(bad):
        ctx.violations += int(bad.sum())
        off[bad] *= (radius[bad] / norm[bad])[:, None]
    return centers + off


def _round(ctx: RoundContext, S_I: Strategy, S_II: Strategy, force: str | None = None):
    prm = ctx.params
    x = ctx.x
    u = ctx.draws
    n, d = x.shape
    mover_I = u[:, 0] < 0.5
    stay = np.zeros(n, dtype=bool)
    for S, mask in ((S_I, mover_I), (S_II, ~mover_I)):
        rows = np.nonzero(mask)[0]
        if rows.size:
            stay[rows] = np.asarray(S.stay_or_play(ctx, rows), dtype=bool)
    play = ~stay
    c = np.full(n, np.nan)
    for chooser, mask in ((S_II, play & mover_I), (S_I, play & ~mover_I)):
        rows = np.nonzero(mask)[0]
        if rows.size:
            picked = np.asarray(chooser.pick_c(ctx, rows), dtype=float)
            bad = (picked < prm.m_eps * (1 - 1e-12)) | (picked > prm.M_eps * (1 + 1e-12)) | ~np.isfinite(picked)
            if np.any(bad):
                ctx.violations += int(bad.sum())
                picked = np.clip(np.nan_to_num(picked, nan=_middle_c(prm)), prm.m_eps, prm.M_eps)
            c[rows] = picked
    heads = play & (u[:, 1] < prm.alpha)
    tug = play & ~heads & (u[:, 2] < prm.beta)
    if force == "noise":
        heads = np.zeros(n, dtype=bool)
        tug = np.zeros(n, dtype=bool)
    elif force is not None:
        raise ValueError(f"unknown forcing {force!r}")
    noise = play & ~heads & ~tug
    tug_I = tug & (u[:, 3] < 0.5)
    tug_II = tug & ~tug_I

    new = x.copy()
    branch = np.full(n, STAY, dtype=np.int8)
    for S, mask in ((S_I, heads & mover_I), (S_II, heads & ~mover_I)):
        rows = np.nonzero(mask)[0]
        if rows.size:
            r = prm.small_radius(c[rows])
            pts = np.asarray(S.pick_small_ball_point(ctx, rows, c[rows]), dtype=float).reshape(rows.size, d)
            new[rows] = _clamp(pts, x[rows], r, ctx)
    for S, mask in ((S_I, tug_I), (S_II, tug_II)):
        rows = np.nonzero(mask)[0]
        if rows.size:
            r = prm.tug_radius(c[rows])
            pts = np.asarray(S.pick_tug_point(ctx, rows, c[rows]), dtype=float).reshape(rows.size, d)
            new[rows] = _clamp(pts, x[rows], r, ctx)
    rows = np.nonzero(noise)[0]
    if rows.size:
        r = prm.tug_radius(c[rows])
        new[rows] = x[rows] + r[:, None] * _uniform_in_ball(u[rows, 4 : 4 + d + 1], d)
    branch[heads] = HEADS
    branch[tug_I] = TUG_I
    branch[tug_II] = TUG_II
    branch[noise] = NOISE
    return new, branch, mover_I, c


@dataclass
class BatchResult:
    payoffs: np.ndarray
    rounds: np.ndarray
    exited: np.ndarray
    violations: int
    positions: np.ndarray | None = None  # (n, J+1, d), nan after termination
    branches: np.ndarray | None = None  # (n, J), -1 after termination
    movers: np.ndarray | None = None  # (n, J) 1 for player I
    cs: np.ndarray | None = None  # (n, J)
    t0: float = 0.0
    first_episode: int = 0


def simulate(setup: GameSetup, x0, t0: float, S_I: Strategy, S_II: Strategy, n: int, seed: int = 0,
             first_episode: int = 0, trace: bool = False, force: str | None = None,
             chunk: int = 10000) -> BatchResult:
    """Play ``n`` independent episodes from ``(x0, t0)``."""
    prm = setup.params
    d = prm.d
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.size != d:
        raise ValueError("starting point has the wrong dimension")
    if not t0 > 0:
        raise ValueError("starting time must be positive")
    if not setup.inside(x0)[0]:
        raise ValueError("starting point outside the domain")
    J = setup.rounds_for(t0)
    payoffs = np.empty(n)
    rounds = np.zeros(n, dtype=int)
    exited = np.zeros(n, dtype=bool)
    violations = 0
    if trace:
        positions = np.full((n, J + 1, d), np.nan)
        branches = np.full((n, J), -1, dtype=np.int8)
        movers = np.zeros((n, J), dtype=np.int8)
        cs = np.full((n, J), np.nan)
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        tables = draw_tables(seed, first_episode + start, m, J, setup.slots)
        x = np.tile(x0, (m, 1))
        active = np.ones(m, dtype=bool)
        if trace:
            positions[start : start + m, 0] = x0
        for k in range(J):
            rows = np.nonzero(active)[0]
            if rows.size == 0:
                break
            ctx = RoundContext(setup, k, J - k, x[rows], tables[rows, k, :])
            new, branch, mover_I, c = _round(ctx, S_I, S_II, force)
            violations += ctx.violations
            x[rows] = new
            g_rows = start + rows
            if trace:
                positions[g_rows, k + 1] = new
                branches[g_rows, k] = branch
                movers[g_rows, k] = mover_I
                cs[g_rows, k] = c
            rounds[g_rows] = k + 1
            out = ~setup.inside(new)
            if np.any(out):
                er = rows[out]
                payoffs[start + er] = setup.g(x[er])
                exited[start + er] = True
                active[er] = False
            if k + 1 == J:
                fin = rows[~out]
                if fin.size:
                    payoffs[start + fin] = setup.u0(x[fin])
                active[:] = False
    res = BatchResult(payoffs, rounds, exited, violations, t0=t0, first_episode=first_episode)
    if trace:
        res.positions, res.branches, res.movers, res.cs = positions, branches, movers, cs
    return res


@dataclass
class EpisodeRecord:
    positions: np.ndarray
    times: np.ndarray
    branches: list
    movers: list
    cs: np.ndarray
    payoff: float
    exited: bool

    @property
    def length(self) -> int:
        return len(self.branches)

    def to_csv(self, path) -> None:
        write_trace_csv(path, [self])


def run_episode(setup: GameSetup, x0, t0: float, S_I: Strategy, S_II: Strategy, seed: int = 0,
                episode: int = 0, force: str | None = None) -> EpisodeRecord:
    res = simulate(setup, x0, t0, S_I, S_II, 1, seed, episode, trace=True, force=force)
    return _record(res, 0, setup)


def _record(res: BatchResult, i: int, setup: GameSetup) -> EpisodeRecord:
    L = int(res.rounds[i])
    times = res.t0 - np.arange(L + 1) * setup.params.tau
    return EpisodeRecord(
        res.positions[i, : L + 1].copy(),
        times,
        [BRANCHES[b] for b in res.branches[i, :L]],
        ["I" if m else "II" for m in res.movers[i, :L]],
        res.cs[i, :L].copy(),
        float(res.payoffs[i]),
        bool(res.exited[i]),
    )


def episodes(res: BatchResult, setup: GameSetup) -> list:
    if res.positions is None:
        raise ValueError("batch was not traced")
    return [_record(res, i, setup) for i in range(len(res.payoffs))]


def play_round(state: GameState, S_I: Strategy, S_II: Strategy, setup: GameSetup,
               rng: np.random.Generator, force: str | None = None) -> GameState:
    """Advance one state by one round using one row of uniforms from ``rng``."""
    if state.terminated:
        raise ValueError("state already terminated")
    prm = setup.params
    remaining = setup.rounds_for(state.t)
    draws = rng.random((1, setup.slots))
    x = np.atleast_1d(np.asarray(state.x, dtype=float)).reshape(1, prm.d)
    ctx = RoundContext(setup, state.k, remaining, x, draws)
    new, _, _, _ = _round(ctx, S_I, S_II, force)
    t = state.t - prm.tau
    pos = new[0]
    out = not setup.inside(pos)[0]
    if out:
        return GameState(pos, t, state.k + 1, True, float(setup.g(pos)))
    if remaining <= 1:
        return GameState(pos, t, state.k + 1, True, float(setup.u0(pos)))
    return GameState(pos, t, state.k + 1, False, None)


def write_trace_csv(path, records) -> None:
    """Compact trace: one row per round, the payoff on each episode's last row."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d = records[0].positions.shape[1] if records else 1
        w.writerow(["episode", "k"] + [f"x{i}" for i in range(d)] + ["t", "branch", "payoff"])
        for e, rec in enumerate(records):
            for k in range(rec.length + 1):
                branch = rec.branches[k - 1] if k > 0 else "start"
                pay = repr(rec.payoff) if k == rec.length else ""
                w.writerow([e, k] + [repr(float(v)) for v in rec.positions[k]] + [repr(float(rec.times[k])), branch, pay])


# ---------------------------------------------------------------------------
# estimates and diagnostics


@dataclass
class ValueEstimate:
    mean: float
    stderr: float
    n: int
    counts: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    min: float = 0.0
    max: float = 0.0
    violations: int = 0

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def summarize(payoffs: np.ndarray, violations: int = 0, bins: int = 20) -> ValueEstimate:
    payoffs = np.asarray(payoffs, dtype=float)
    n = payoffs.size
    sd = float(np.std(payoffs, ddof=1)) if n > 1 else 0.0
    counts, edges = np.histogram(payoffs, bins=bins)
    return ValueEstimate(float(payoffs.mean()), sd / math.sqrt(n), n, counts.tolist(), edges.tolist(),
                         float(payoffs.min()), float(payoffs.max()), int(violations))


def estimate_value(setup: GameSetup, x0, t0: float, S_I: Strategy, S_II: Strategy, n_episodes: int,
                   seed: int = 0, chunk: int = 10000) -> ValueEstimate:
    if n_episodes < 100:
        raise ValueError("need at least 100 episodes")
    res = simulate(setup, x0, t0, S_I, S_II, n_episodes, seed, chunk=chunk)
    return summarize(res.payoffs, res.violations)


@dataclass
class MartingaleReport:
    role: str
    mean_increment: float
    stderr: float
    n_increments: int
    n_episodes: int
    passed: bool

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def martingale_increments(res: BatchResult, solution: SpaceTimeSolution, setup: GameSetup, eta: float,
                          role: str) -> np.ndarray:
    """Increments of ``M_k = u_eps(x_k, t_k) -+ eta / 2^k`` over all played rounds.

    Role I uses the minus sign (a submartingale under greedy I), role II the
    plus sign.  On a constant field the role-I increment is ``+eta / 2^(k+1)``.
    """
    if res.positions is None:
        raise ValueError("martingale diagnostics need traced episodes")
    if role not in ("I", "II"):
        raise ValueError("role must be 'I' or 'II'")
    J = res.branches.shape[1]
    n = len(res.payoffs)
    sign = -1.0 if role == "I" else 1.0
    values = np.full((n, J + 1), np.nan)
    for k in range(J + 1):
        alive = res.rounds >= k
        if k > 0:
            alive &= ~np.isnan(res.positions[:, k, 0])
        if not np.any(alive):
            continue
        pts = res.positions[alive, k]
        last = res.rounds[alive] == k
        terminal = (last & res.exited[alive]) | (k == J)
        vals = np.empty(len(pts))
        if np.any(terminal):
            vals[terminal] = res.payoffs[alive][terminal]
        if np.any(~terminal):
            vals[~terminal] = solution.fields[J - k](pts[~terminal])
        values[alive, k] = vals
    slack = sign * eta / 2.0 ** np.arange(J + 1)
    M = values + slack[None, :]
    inc = M[:, 1:] - M[:, :-1]
    return inc[np.isfinite(inc)]


def martingale_diagnostic(res: BatchResult, solution: SpaceTimeSolution, setup: GameSetup, eta: float,
                          role: str) -> MartingaleReport:
    inc = martingale_increments(res, solution, setup, eta, role)
    mean = float(inc.mean())
    se = float(inc.std(ddof=1) / math.sqrt(inc.size)) if inc.size > 1 else 0.0
    ok = mean >= -3 * se if role == "I" else mean <= 3 * se
    return MartingaleReport(role, mean, se, int(inc.size), len(res.payoffs), bool(ok))


def interpolation_defects(res: BatchResult, solution: SpaceTimeSolution, setup: GameSetup) -> np.ndarray:
    """Per-episode sum of the discrepancies between play at off-node positions
    and the lattice solution.

    Writing ``W_k`` for the interpolated ``u_eps(., t_k)`` (the payoff on the
    terminal round) and ``V_k = W_{k+1}`` for the field strategies consult,
    every episode satisfies

        payoff - W_0(x_0) = sum_k [A[V_k](x_k) - W_k(x_k)]
                          + sum_k [W_{k+1}(x_{k+1}) - V_k(x_{k+1})]
                          + sum_k [V_k(x_{k+1}) - A[V_k](x_k)].

    The last sum has mean zero when both players are greedy.  This function
    returns the first two sums per episode.
    """
    if res.positions is None:
        raise ValueError("interpolation defects need traced episodes")
    J = res.branches.shape[1]
    out = np.zeros(len(res.payoffs))
    for k in range(J):
        rows = np.nonzero(res.rounds >= k + 1)[0]
        if rows.size == 0:
            break
        V = solution.fields[J - k - 1]
        x = res.positions[rows, k]
        exact = operator_at(make_oracle(V, setup.sampling), x, setup.params, setup.cgrid)
        out[rows] += exact - solution.fields[J - k](x)
        term = rows[res.rounds[rows] == k + 1]
        if term.size:
            out[term] += res.payoffs[term] - V(res.positions[term, k + 1])
    return out


def interpolation_tolerance(setup: GameSetup, solution: SpaceTimeSolution, x0, t0: float, S_I: Strategy,
                            S_II: Strategy, n: int = 10000, seed: int = 2**32 + 1) -> float:
    """Upper 3-sigma bound on ``E|interpolation defect|`` from an independent traced batch."""
    res = simulate(setup, x0, t0, S_I, S_II, n, seed, trace=True)
    dev = np.abs(interpolation_defects(res, solution, setup))
    return float(dev.mean() + 3 * dev.std(ddof=1) / math.sqrt(n))


def branch_frequencies(res: BatchResult) -> dict:
    if res.branches is None:
        raise ValueError("batch was not traced")
    b = res.branches[res.branches >= 0]
    counts = np.bincount(b, minlength=len(BRANCHES))
    movers = res.movers[res.branches >= 0]
    return {
        "rounds": int(b.size),
        "counts": {name: int(cnt) for name, cnt in zip(BRANCHES, counts)},
        "mover_I": int(movers.sum()),
    }
