from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from plapdpp import testfuncs as tf
from plapdpp.amvf import CGrid, a_eps
from plapdpp.core import Params
from plapdpp.dpp import DirichletProblem, solve_bounded
from plapdpp.field import Box, LatticeField, ball_stats
from plapdpp.game import (
    BRANCHES,
    AlwaysStayStrategy,
    CenterStayStrategy,
    DPPGreedyStrategy,
    GameSetup,
    GameState,
    IntervalOracle,
    SampledOracle,
    Strategy,
    UniformRandomStrategy,
    WorstSampledPointStrategy,
    baseline_strategies,
    branch_frequencies,
    episode_stream,
    episodes,
    estimate_value,
    interpolation_defects,
    make_oracle,
    martingale_diagnostic,
    martingale_increments,
    operator_at,
    play_round,
    run_episode,
    simulate,
    summarize,
    write_trace_csv,
)

UNIT = Box((-1.0,), (1.0,))


def _setup(u0=None, g=None, eps=0.3, **kw):
    f = tf.pos_power(1, 3.0)
    return GameSetup(Params(1, 3.0, eps), u0 or f, g or f, UNIT, **kw)


def _greedy_pair(sol):
    return DPPGreedyStrategy(sol, "I"), DPPGreedyStrategy(sol, "II")


class TestOracles:
    @pytest.fixture
    def fld(self):
        rng = np.random.default_rng(0)
        return LatticeField(rng.normal(size=201), [-1.0], 0.01)

    @pytest.mark.parametrize("x, r", [(0.0, 0.3), (0.123, 0.0712), (-0.4, 0.004), (0.5, 0.5)])
    def test_matches_ball_stats(self, fld, x, r):
        ora = IntervalOracle(fld)
        sup, inf, asup, ainf = ora.extremes([x], [[r]])
        ref = ball_stats(fld, [x], r, allow_subresolution=True)
        assert sup[0, 0] == pytest.approx(ref.sup, abs=1e-14)
        assert inf[0, 0] == pytest.approx(ref.inf, abs=1e-14)
        assert ora.means([x], [[r]])[0, 0] == pytest.approx(ref.mean, abs=1e-12)
        assert fld(asup[0, 0]) == pytest.approx(sup[0, 0], abs=1e-13)
        assert fld(ainf[0, 0]) == pytest.approx(inf[0, 0], abs=1e-13)
        assert abs(asup[0, 0] - x) <= r + 1e-12

    def test_operator_at_matches_a_eps(self, solution_03):
        prm = solution_03.params
        grid = CGrid.for_params(prm)
        fld = solution_03.fields[5]
        xs = np.array([0.0, 0.137, -0.61])
        got = operator_at(IntervalOracle(fld), xs, prm, grid)
        for x, v in zip(xs, got):
            assert v == pytest.approx(a_eps(fld, [x], prm, grid), abs=1e-13)

    def test_make_oracle_picks_kind(self, fld):
        assert isinstance(make_oracle(fld), IntervalOracle)
        assert isinstance(make_oracle(tf.quadratic(2)), SampledOracle)

    def test_sampled_oracle_linear_extreme(self):
        # a linear field is extremal in the +e1 direction, up to the sphere sampling
        ora = SampledOracle(tf.affine(2, a=[1.0, 0.0]))
        sup, inf, asup, ainf = ora.extremes(np.zeros((1, 2)), np.array([[0.5]]))
        assert 0.5 - 1e-3 <= sup[0, 0] <= 0.5
        assert np.allclose(asup[0, 0], [0.5, 0.0], atol=0.02) and np.allclose(ainf[0, 0], [-0.5, 0.0], atol=0.02)

    def test_outside_lattice(self, fld):
        from plapdpp.field import OutsideDefinitionRegion

        with pytest.raises(OutsideDefinitionRegion):
            IntervalOracle(fld).extremes([0.9], [[0.3]])


class TestSetup:
    def test_needs_domain(self):
        with pytest.raises(ValueError):
            GameSetup(Params(1, 3.0, 0.3), tf.constant(1), tf.constant(1))

    def test_slots_and_rounds(self):
        s = _setup()
        assert s.slots == 4 + 2 + 2 * 4
        assert s.rounds_for(0.5) == math.ceil(0.5 / 0.045)
        assert s.rounds_for(0.045) == 1

    def test_strategy_role(self):
        with pytest.raises(ValueError):
            Strategy("III")


def test_streams_are_reproducible_and_distinct():
    a = episode_stream(7, 3).random(5)
    assert np.array_equal(a, episode_stream(7, 3).random(5))
    assert not np.array_equal(a, episode_stream(7, 4).random(5))
    assert not np.array_equal(a, episode_stream(8, 3).random(5))
    with pytest.raises(ValueError):
        episode_stream(-1, 0)


@pytest.mark.parametrize("t0", [0.5, 0.2])
def test_always_stay_length(t0):
    s = _setup()
    res = simulate(s, [0.0], t0, AlwaysStayStrategy("I"), AlwaysStayStrategy("II"), 50, seed=1)
    assert np.all(res.rounds == math.ceil(2 * t0 / 0.3**2))
    assert not res.exited.any()
    assert np.all(res.payoffs == 0.0)


def test_constant_data_payoff():
    K = 2.75
    c = tf.constant(1, value=K)
    est = estimate_value(_setup(c, c), [0.3], 0.5, UniformRandomStrategy("I"), UniformRandomStrategy("II"), 200)
    assert est.mean == K and est.stderr == 0.0


def test_single_round_when_t0_below_tau():
    s = _setup()
    res = simulate(s, [0.0], 0.03, UniformRandomStrategy("I"), UniformRandomStrategy("II"), 100)
    assert np.all(res.rounds == 1)


@pytest.mark.parametrize("bad", [dict(x0=[2.0]), dict(x0=[0.0, 0.0]), dict(t0=0.0)])
def test_simulate_rejects(bad):
    kw = dict(x0=[0.0], t0=0.5) | bad
    with pytest.raises(ValueError):
        simulate(_setup(), kw["x0"], kw["t0"], AlwaysStayStrategy("I"), AlwaysStayStrategy("II"), 10)


def test_estimate_requires_100():
    with pytest.raises(ValueError):
        estimate_value(_setup(), [0.0], 0.5, AlwaysStayStrategy("I"), AlwaysStayStrategy("II"), 99)


def test_reproducible_and_chunk_invariant(solution_03):
    s = _setup()
    I, II = _greedy_pair(solution_03)
    a = simulate(s, [0.0], 0.5, I, II, 300, seed=11)
    b = simulate(s, [0.0], 0.5, I, II, 300, seed=11, chunk=70)
    assert np.array_equal(a.payoffs, b.payoffs) and np.array_equal(a.rounds, b.rounds)
    # episodes are keyed individually: a later slice repeats the tail
    c = simulate(s, [0.0], 0.5, I, II, 100, seed=11, first_episode=200)
    assert np.array_equal(c.payoffs, a.payoffs[200:])


class _Cheater(UniformRandomStrategy):
    def pick_tug_point(self, ctx, rows, c):
        return ctx.x[rows] + 10.0

    def pick_c(self, ctx, rows):
        return np.full(len(rows), 1e9)


def test_illegal_moves_are_clamped_and_counted():
    s = _setup()
    res = simulate(s, [0.0], 0.5, _Cheater("I"), CenterStayStrategy("II"), 200, seed=2, trace=True)
    assert res.violations > 0
    steps = np.abs(np.diff(res.positions[:, :, 0], axis=1))
    prm = s.params
    assert np.nanmax(steps) <= prm.tug_radius(prm.m_eps) * (1 + 1e-12)
    assert np.nanmax(res.cs) <= prm.M_eps


def test_payoffs_within_data_range(solution_03):
    s = _setup()
    I, II = _greedy_pair(solution_03)
    res = simulate(s, [0.0], 0.5, I, UniformRandomStrategy("II"), 500, seed=3)
    assert res.payoffs.min() >= 0.0
    # exits land within the reach of the boundary
    assert res.payoffs.max() <= (1 + s.params.reach) ** 3.5
    assert res.violations == 0


def test_greedy_vs_greedy_close_to_dpp(solution_03):
    s = _setup()
    I, II = _greedy_pair(solution_03)
    est = estimate_value(s, [0.0], 0.5, I, II, 4000, seed=5)
    u = float(solution_03.value([0.0], 0.5))
    assert abs(est.mean - u) <= 4 * est.stderr + 0.02


def test_paired_monotonicity_in_data(solution_03):
    # same uniforms, payoffs raised by a constant shift of both data
    I, II = _greedy_pair(solution_03)
    lo = simulate(_setup(), [0.0], 0.5, I, II, 300, seed=4)
    f = tf.pos_power(1, 3.0).shifted(0.5)
    hi = simulate(_setup(f, f), [0.0], 0.5, I, II, 300, seed=4)
    assert np.all(hi.payoffs >= lo.payoffs)


def test_greedy_rejects_other_params(solution_03):
    s = _setup(eps=0.25)
    I, II = _greedy_pair(solution_03)
    with pytest.raises(ValueError):
        simulate(s, [0.0], 0.2, I, II, 10)


def test_greedy_rejects_long_horizon(solution_03):
    I, II = _greedy_pair(solution_03)
    with pytest.raises(ValueError):
        simulate(_setup(), [0.0], 2.0, I, II, 10)


def test_forced_noise_only():
    s = _setup()
    res = simulate(s, [0.0], 0.5, CenterStayStrategy("I"), CenterStayStrategy("II"), 200, trace=True, force="noise")
    b = res.branches[res.branches >= 0]
    assert np.all(b == BRANCHES.index("noise"))
    with pytest.raises(ValueError):
        simulate(s, [0.0], 0.5, CenterStayStrategy("I"), CenterStayStrategy("II"), 10, force="heads")


def test_branch_frequencies_shape():
    s = _setup()
    res = simulate(s, [0.0], 0.5, CenterStayStrategy("I"), CenterStayStrategy("II"), 500, trace=True)
    fr = branch_frequencies(res)
    assert sum(fr["counts"].values()) == fr["rounds"] == int(res.rounds.sum())
    assert fr["counts"]["stay"] == 0
    with pytest.raises(ValueError):
        branch_frequencies(simulate(s, [0.0], 0.5, CenterStayStrategy("I"), CenterStayStrategy("II"), 5))


def test_martingale_constant_field():
    c = tf.constant(1, value=1.0)
    s = _setup(c, c)
    sol = solve_bounded(DirichletProblem(UNIT, c, c, 0.6, Params(1, 3.0, 0.3)))
    eta = 0.01
    res = simulate(s, [0.0], 0.5, AlwaysStayStrategy("I"), AlwaysStayStrategy("II"), 5, trace=True)
    inc = martingale_increments(res, sol, s, eta, "I").reshape(5, -1)
    k = np.arange(inc.shape[1])
    assert np.allclose(inc, eta / 2.0 ** (k + 1), atol=1e-14)
    inc2 = martingale_increments(res, sol, s, eta, "II").reshape(5, -1)
    assert np.allclose(inc2, -eta / 2.0 ** (k + 1), atol=1e-14)
    with pytest.raises(ValueError):
        martingale_increments(res, sol, s, eta, "III")


def test_martingale_submartingale_greedy_I(solution_03):
    s = _setup()
    res = simulate(s, [0.0], 0.5, DPPGreedyStrategy(solution_03, "I"), UniformRandomStrategy("II"), 1000,
                   seed=9, trace=True)
    rep = martingale_diagnostic(res, solution_03, s, 1e-3, "I")
    assert rep.passed and rep.n_episodes == 1000


def test_interpolation_defects_decompose_payoff(solution_03):
    # payoff - W0 = defects + martingale term; with greedy play the martingale term is centred
    s = _setup()
    I, II = _greedy_pair(solution_03)
    res = simulate(s, [0.0], 0.5, I, II, 2000, seed=21, trace=True)
    dfc = interpolation_defects(res, solution_03, s)
    w0 = float(solution_03.value([0.0], 0.5))
    mart = res.payoffs - w0 - dfc
    assert abs(mart.mean()) <= 4 * mart.std(ddof=1) / math.sqrt(len(mart))


def test_run_episode_and_trace(tmp_path):
    s = _setup()
    rec = run_episode(s, [0.0], 0.5, UniformRandomStrategy("I"), UniformRandomStrategy("II"), seed=3)
    assert rec.times[0] == 0.5
    assert np.allclose(np.diff(rec.times), -s.params.tau)
    assert len(rec.positions) == rec.length + 1 and len(rec.movers) == rec.length
    rec.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["episode", "k", "x0", "t", "branch", "payoff"]
    assert len(rows) == rec.length + 2
    assert float(rows[-1][-1]) == rec.payoff and rows[1][4] == "start"


def test_episodes_needs_trace():
    s = _setup()
    res = simulate(s, [0.0], 0.5, AlwaysStayStrategy("I"), AlwaysStayStrategy("II"), 3)
    with pytest.raises(ValueError):
        episodes(res, s)
    recs = episodes(simulate(s, [0.0], 0.5, AlwaysStayStrategy("I"), AlwaysStayStrategy("II"), 3, trace=True), s)
    assert len(recs) == 3


def test_write_trace_multiple(tmp_path):
    s = _setup()
    res = simulate(s, [0.0], 0.2, UniformRandomStrategy("I"), UniformRandomStrategy("II"), 4, trace=True)
    write_trace_csv(tmp_path / "m.csv", episodes(res, s))
    rows = list(csv.reader(open(tmp_path / "m.csv")))[1:]
    assert {r[0] for r in rows} == {"0", "1", "2", "3"}


def test_play_round_single_state():
    s = _setup()
    rng = np.random.default_rng(0)
    st = GameState(np.array([0.0]), 0.5)
    n = 0
    while not st.terminated:
        st = play_round(st, UniformRandomStrategy("I"), UniformRandomStrategy("II"), s, rng)
        n += 1
    assert n <= s.rounds_for(0.5) and st.payoff is not None
    with pytest.raises(ValueError):
        play_round(st, UniformRandomStrategy("I"), UniformRandomStrategy("II"), s, rng)


def test_whole_space_flag_never_exits():
    prm = Params(1, 3.0, 0.3)
    s = GameSetup(prm, tf.bump(1), tf.constant(1, value=0.0), whole_space=True)
    res = simulate(s, [0.0], 0.5, UniformRandomStrategy("I"), UniformRandomStrategy("II"), 200)
    assert not res.exited.any() and np.all(res.rounds == s.rounds_for(0.5))


def test_baselines_registry(solution_03):
    b = baseline_strategies(solution_03, "II")
    assert set(b) == {"uniform_random", "always_stay", "center_stay", "worst_sampled_point"}
    assert all(s.role == "II" for s in b.values())
    assert isinstance(b["worst_sampled_point"], WorstSampledPointStrategy)


def test_summarize():
    est = summarize(np.array([1.0, 2.0, 3.0, 4.0]), violations=2, bins=4)
    assert est.mean == 2.5 and est.n == 4 and sum(est.counts) == 4 and est.violations == 2
    assert est.stderr == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert '"mean": 2.5' in est.to_json()
