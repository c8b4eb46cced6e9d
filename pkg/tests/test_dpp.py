from __future__ import annotations

import json
import math

import numpy as np
import pytest

from plapdpp import testfuncs as tf
from plapdpp.amvf import a_eps
from plapdpp.core import Params, signed_pow
from plapdpp.dpp import (
    DirichletProblem,
    build_barrier,
    check_barrier_ordering,
    comparison_report,
    default_h,
    dpp_step,
    growth_rate,
    regularity_report,
    solve_bounded,
    solve_whole_space,
    truncation_halfwidth,
)
from plapdpp.field import Ball, Box

from conftest import test_problem

UNIT = Box((-1.0,), (1.0,))


def _problem(u0, g, eps=0.3, T=0.2, domain=UNIT, **kw):
    return DirichletProblem(domain, u0, g, T, Params(domain.d, 3.0, eps), **kw)


def test_default_h_resolves_smallest_ball():
    prm = Params(1, 3.0, 0.3)
    assert default_h(prm) == pytest.approx(prm.small_radius(prm.m_eps) / 4)
    assert default_h(prm) <= prm.band_width


def test_rejects_coarse_grid():
    prm = Params(1, 3.0, 0.3)
    with pytest.raises(ValueError):
        DirichletProblem(UNIT, tf.constant(1), tf.constant(1), 0.5, prm, h=1.01 * prm.band_width)


def test_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        DirichletProblem(UNIT, tf.constant(2), tf.constant(2), 0.5, Params(2, 3.0, 0.3))


@pytest.mark.parametrize("K", [-2.0, 0.0, 3.5])
def test_constant_fixed_point(K):
    c = tf.constant(1, value=K)
    sol = solve_bounded(_problem(c, c))
    for f in sol.fields:
        assert np.all(f.values == pytest.approx(K, abs=1e-13))


def test_deep_interior_node_sees_zeros():
    # u0 = 0 inside, g = 1 outside; nodes further than the reach from the boundary stay 0
    prob = _problem(tf.constant(1, value=0.0), tf.constant(1, value=1.0), eps=0.2,
                    domain=Box((-3.0,), (3.0,)))
    u1 = dpp_step(prob.initial_field(), prob)
    nodes = u1.nodes()[..., 0]
    deep = np.abs(nodes) < 3.0 - prob.params.reach
    assert deep.any()
    assert np.all(u1.values[deep] == 0.0)
    assert np.all(u1.values[~prob.lattice()[2]] == 1.0)


def test_step_is_monotone(rng):
    prob = _problem(tf.gaussian(1), tf.constant(1, value=0.0))
    u = prob.initial_field()
    v = u.with_values(u.values + np.abs(rng.normal(size=u.shape)))
    assert np.all(dpp_step(v, prob).values >= dpp_step(u, prob).values)


def test_step_matches_pointwise_operator():
    prob = _problem(tf.cosine(1), tf.cosine(1))
    u = prob.initial_field()
    u1 = dpp_step(u, prob)
    i = u.shape[0] // 2 + 3
    x = u.nodes()[i]
    assert u1.values[i] == pytest.approx(a_eps(u, x, prob.params, prob.cgrid), abs=1e-13)


def test_step_rejects_foreign_field():
    prob = _problem(tf.cosine(1), tf.cosine(1))
    u = prob.initial_field()
    with pytest.raises(ValueError):
        dpp_step(u.with_values(u.values[:-1]), prob)


def test_solution_layout(solution_03):
    prm = solution_03.params
    assert len(solution_03.fields) == math.ceil(1.0 / prm.tau - 1e-9) + 1
    assert solution_03.times[1] == pytest.approx(prm.tau)
    # g on every exterior node at every step
    f0 = solution_03.fields[0]
    ext = ~solution_03.interior
    g = tf.pos_power(1, 3.0)(f0.nodes()[ext])
    for f in solution_03.fields:
        assert np.array_equal(f.values[ext], g)


def test_value_uses_right_mesh_index(solution_03):
    tau = solution_03.params.tau
    assert solution_03.index_for_time(0.5) == math.ceil(0.5 / tau)
    assert solution_03.index_for_time(2 * tau) == 2
    with pytest.raises(ValueError):
        solution_03.index_for_time(5.0)


def test_sup_bound(solution_03):
    # g is evaluated on the whole padded exterior, so its norm exceeds 1 here
    nu, ng = test_problem(0.3, T=1.0).norms()
    assert nu <= 1.0 and ng > 1.0
    norms = solution_03.sup_norms()
    assert np.all(norms <= max(nu, ng) + 1e-12)
    assert np.all(norms <= 2 * (nu + ng))
    assert np.all(solution_03.sup_norms("interior") <= max(nu, ng) + 1e-12)


def test_deterministic():
    a = solve_bounded(test_problem(0.4))
    b = solve_bounded(test_problem(0.4))
    assert a.digest() == b.digest()


def test_export(tmp_path):
    sol = solve_bounded(test_problem(0.4, T=0.2))
    man = sol.export(tmp_path, stride=2, extra={"note": 1})
    saved = json.loads((tmp_path / "manifest.json").read_text())
    assert saved["digest"] == sol.digest() == man["digest"]
    assert [f["index"] for f in saved["files"]] == list(range(0, len(sol.fields), 2))
    assert (tmp_path / "u_00000.csv").exists() and saved["note"] == 1


@pytest.mark.parametrize("shift", [0.1, 0.3])
def test_ordered_data_ordered_solutions(shift):
    lo = solve_bounded(_problem(tf.cosine(1), tf.cosine(1), T=0.5))
    hi = solve_bounded(_problem(tf.cosine(1).shifted(shift), tf.cosine(1).shifted(shift), T=0.5))
    # round-off in the shifted operator is ~1e-16, hence the float tolerance
    rep = comparison_report(hi, lo, tol=1e-12)
    assert rep.violations == 0 and rep.step_contraction_violations == 0 and rep.total_bound_violations == 0
    # a constant shift is carried exactly
    assert np.allclose(hi.fields[-1].values - lo.fields[-1].values, shift, atol=1e-12)


def test_ordered_nontrivial_pair():
    lo = solve_bounded(_problem(tf.bump(1, height=0.5).shifted(-0.1), tf.constant(1, value=-0.1), T=0.5))
    hi = solve_bounded(_problem(tf.bump(1), tf.constant(1, value=0.0), T=0.5))
    rep = comparison_report(hi, lo, tol=1e-12)
    assert rep.violations == 0 and rep.step_contraction_violations == 0 and rep.total_bound_violations == 0


def test_comparison_detects_reversed_order():
    lo = solve_bounded(_problem(tf.cosine(1), tf.cosine(1), T=0.1))
    hi = solve_bounded(_problem(tf.cosine(1).shifted(0.2), tf.cosine(1).shifted(0.2), T=0.1))
    assert comparison_report(lo, hi).violations > 0


def test_whole_space_zero():
    sol = solve_whole_space(tf.constant(1, value=0.0), 0.3, Params(1, 3.0, 0.3))
    assert all(np.all(f.values == 0.0) for f in sol.fields)


def test_whole_space_truncation_parameters():
    sol = solve_whole_space(tf.bump(1), 0.5, Params(1, 3.0, 0.3), eta=1e-3)
    K = sol.description["K"]
    assert math.exp(growth_rate(3.0) * 0.5 - K) * sol.description["decay_C"] == pytest.approx(1e-3)
    assert sol.truncation_eta == 1e-3
    assert K == pytest.approx(truncation_halfwidth(sol.description["decay_C"], 3.0, 0.5, 1e-3))


def test_whole_space_rejects_slow_decay():
    with pytest.raises(ValueError):
        solve_whole_space(tf.constant(1, value=1.0), 0.3, Params(1, 3.0, 0.3), C=1.0)


@pytest.mark.slow
def test_whole_space_box_doubling():
    prm = Params(1, 3.0, 0.3)
    eta = 1e-3
    small = solve_whole_space(tf.bump(1), 0.5, prm, eta=eta)
    K = small.description["K"]
    big = solve_whole_space(tf.bump(1), 0.5, prm, K=2 * K, eta=eta)
    xs = np.linspace(-K / 2, K / 2, 101)[:, None]
    gap = np.max(np.abs(small.value(xs, 0.5) - big.value(xs, 0.5)))
    assert gap <= 2 * eta


def test_growth_rate_p3():
    assert growth_rate(3.0) == pytest.approx(2 * math.sqrt(2))


class TestBarriers:
    def test_exponential_identity_p3(self):
        prm = Params(1, 3.0, 0.3)
        bar = build_barrier("exponential", prm, C=1.0)
        L = bar.constants["L"]
        rng = np.random.default_rng(5)
        for x, t in zip(rng.uniform(-2, 2, 20), rng.uniform(0, 1, 20)):
            U = bar([x], t)
            # (|U_x| U_x)_x = 2 U U_x... for U = C e^(Lt) e^x this is 2 U^2
            lhs = float(bar.dt(np.array([x]), t)[0]) - signed_pow(2 * U * U, 0.5)
            assert lhs == pytest.approx((L - math.sqrt(2)) * U, rel=1e-10)

    def test_initial_lower_at_anchor(self):
        dom = Ball((0.0, 0.0), 1.0)
        prm = Params(2, 3.0, 0.3)
        u0 = tf.gaussian(2)
        bar = build_barrier("initial_lower", prm, domain=dom, u0=u0, anchor=[0.0, 0.0], eta=0.1)
        assert bar([0.0, 0.0], 0.0) == pytest.approx(u0([0.0, 0.0]) - 0.1, abs=1e-12)
        assert bar.constants["k1"] > 0 and bar.constants["k2"] > 0

    def test_initial_constants(self):
        dom = UNIT
        prm = Params(1, 3.0, 0.3)
        u0 = tf.affine(1, a=1.0)
        bar = build_barrier("initial_lower", prm, domain=dom, u0=u0, anchor=[0.0], eta=0.1, norm=2.0)
        c = bar.constants
        b = 3.5
        assert c["r"] == pytest.approx(0.05, rel=1e-6)
        assert c["k2"] == pytest.approx(2 * max(2 * c["r"] ** -b, 2.0**b))
        assert c["C_dp"] == pytest.approx(3.5 * 5**0.5)
        assert c["k1"] == pytest.approx(c["C_dp"] * 4 * c["k2"] * 2.0 + 2)

    def test_boundary_lower_below_g_on_band(self):
        prm = Params(1, 3.0, 0.3)
        g = tf.cosine(1)
        eta = 0.2
        bar = build_barrier("boundary_lower", prm, domain=UNIT, g=g, anchor=[1.0], eta=eta, norm=2.0)
        small = prm.with_eps(bar.constants["eps_threshold"])
        band = np.linspace(1.0, 1.0 + small.band_width, 50)[:, None]
        for t in (0.0, 0.5, 1.0):
            assert np.all(bar(band, t) <= g(band) - eta / 8 + 1e-12)

    def test_boundary_upper_mirror(self):
        prm = Params(1, 3.0, 0.3)
        g = tf.cosine(1)
        lo = build_barrier("boundary_lower", prm, domain=UNIT, g=g, anchor=[-1.0], eta=0.1, norm=2.0)
        hi = build_barrier("boundary_upper", prm, domain=UNIT, g=g, anchor=[-1.0], eta=0.1, norm=2.0)
        xs = np.linspace(-1, 1, 9)[:, None]
        assert np.all(lo(xs, 0.3) <= hi(xs, 0.3))

    @pytest.mark.parametrize(
        "kind, kw",
        [
            ("nonsense", {}),
            ("initial_lower", {"anchor": [0.0]}),
            ("initial_lower", {"domain": UNIT, "anchor": [2.0], "u0": tf.constant(1)}),
            ("boundary_lower", {"domain": UNIT, "anchor": [0.5], "g": tf.constant(1)}),
            ("exponential", {"direction": [2.0]}),
            ("initial_lower", {"domain": UNIT, "anchor": [0.0], "u0": tf.constant(1), "eta": 0.0}),
        ],
    )
    def test_rejections(self, kind, kw):
        with pytest.raises(ValueError):
            build_barrier(kind, Params(1, 3.0, 0.3), **kw)

    def test_solution_above_initial_barrier(self, solution_03):
        bar = build_barrier("initial_lower", solution_03.params, domain=UNIT, u0=tf.pos_power(1, 3.0),
                            g=tf.pos_power(1, 3.0), anchor=[0.0], eta=0.1)
        rep = check_barrier_ordering(solution_03, bar, "below")
        assert rep.ok and rep.worst <= 0

    def test_constant_solution_vs_constant_barrier(self):
        c = tf.constant(1, value=2.0)
        sol = solve_bounded(_problem(c, c, T=0.1))
        prm = sol.params
        bar = build_barrier("exponential", prm, C=1.0)
        bar.func = lambda x, t: np.full(len(x), 1.0)
        assert check_barrier_ordering(sol, bar, "below").ok
        assert not check_barrier_ordering(sol, bar, "above").ok

    def test_fault_injection(self, solution_03):
        bar = build_barrier("initial_lower", solution_03.params, domain=UNIT, u0=tf.pos_power(1, 3.0),
                            g=tf.pos_power(1, 3.0), anchor=[0.0], eta=0.1)
        fields = list(solution_03.fields)
        node = int(np.argmax(solution_03.interior)) + 7
        bad = fields[3].values.copy()
        bad[node] = -1e12
        fields[3] = fields[3].with_values(bad)
        corrupted = type(solution_03)(solution_03.params, fields, solution_03.interior, solution_03.band)
        rep = check_barrier_ordering(corrupted, bar, "below")
        assert not rep.ok and rep.violations == 1
        assert rep.worst_node == (node,) and rep.worst_step == 3

    def test_bad_sense(self, solution_03):
        bar = build_barrier("exponential", solution_03.params)
        with pytest.raises(ValueError):
            check_barrier_ordering(solution_03, bar, "sideways")


class TestRegularity:
    def test_constant_zero_translation(self):
        sol = solve_whole_space(tf.constant(1, value=0.0), 0.2, Params(1, 3.0, 0.3))
        rep = regularity_report(sol, 3)
        assert max(rep.translation) == 0.0

    def test_bump_translation_below_h(self):
        sol = solve_whole_space(tf.bump(1), 0.5, Params(1, 3.0, 0.3), eta=1e-3)
        rep = regularity_report(sol, 1)
        assert rep.translation_violations == 0 and rep.sup_violations == 0
        assert max(rep.translation) <= sol.h + 1e-12
        assert rep.interpolant_gap_max <= rep.time_ratio_max * sol.params.tau**0.5 + 1e-12

    def test_rejects_fractional_shift(self):
        sol = solve_whole_space(tf.constant(1, value=0.0), 0.1, Params(1, 3.0, 0.3))
        with pytest.raises(ValueError):
            regularity_report(sol, 0.5)

    @pytest.mark.slow
    def test_time_ratio_stable_across_eps(self):
        ratios = []
        for e in (0.4, 0.3):
            sol = solve_whole_space(tf.bump(1), 0.5, Params(1, 3.0, e), eta=1e-3)
            ratios.append(regularity_report(sol, 1).time_ratio_max)
        assert ratios[1] <= 2 * ratios[0]
