from dataclasses import replace

import numpy as np
import pytest

from mfgkit.errors import MaxIterExceeded, ParamOutOfRange
from mfgkit.flow import MeasureFlow, audit_flow, integrate_flow
from mfgkit.hjb import SpaceTimeGrid
from mfgkit.measures import gaussian_measure
from mfgkit.mfg import SolveParams, apply_S, pairing_tolerance, solve, stability_experiment
from mfgkit.model import builtin

FAST = SolveParams(nx=101, nt=50, bounds=((-4.0, 4.0),))


@pytest.mark.parametrize("kw", [
    {"damping": 0.0}, {"damping": 1.5}, {"tol": 0.0}, {"max_iter": 0},
    {"nt": 1}, {"nx": 4}, {"initial": "cold"}, {"threads": 0},
])
def test_params_validation(kw):
    with pytest.raises(ParamOutOfRange):
        SolveParams(**kw)


def test_quadratic_converges_immediately():
    sol = solve(builtin("quadratic"), gaussian_measure(100, 0.5, 0.5, seed=0), FAST)
    assert sol.converged and sol.iterations == 1
    assert sol.residual < 1e-12
    assert sol.flow.nt == sol.value.grid.nt


def test_apply_S_constant_for_measure_free_problem():
    problem = builtin("quadratic")
    mu = gaussian_measure(50, 0.0, 1.0, seed=1)
    grid = FAST.make_grid(problem, mu)
    static = MeasureFlow.static(mu, 1.0, FAST.nt)
    other = integrate_flow(lambda t, x: np.ones_like(x), mu, FAST.nt, 1.0)
    a = apply_S(problem, static, FAST, grid)
    b = apply_S(problem, other, FAST, grid)
    np.testing.assert_array_equal(a.positions, b.positions)


def test_apply_S_lq_mean_frozen_mean():
    a, m0, T = 0.5, 1.0, 1.0
    problem = builtin("lq_mean", {"a": a})
    mu = gaussian_measure(200, m0, 0.4, seed=2)
    out = apply_S(problem, MeasureFlow.static(mu, T, FAST.nt), FAST)
    t = out.times
    # m' = -(m - a m0) / (1 + T - t), m(0) = m0
    exact = a * m0 + (m0 - a * m0) * (1 + T - t) / (1 + T)
    np.testing.assert_allclose(out.mean_curve()[:, 0], exact, atol=5e-3)
    np.testing.assert_array_equal(out.positions[0], mu.points)
    rep = audit_flow(out, cv=1.0)
    assert rep.growth_ok and rep.m2_max <= rep.m2_bound


def test_lq_mean_fixed_point_small():
    m0 = 1.0
    sol = solve(builtin("lq_mean", {"a": 0.5}), gaussian_measure(300, m0, 0.4, seed=3), FAST)
    assert sol.converged
    assert sol.residual_history[-1] <= FAST.tol
    assert sol.flow.mean_curve()[-1, 0] == pytest.approx(m0 / 1.5, abs=0.02)
    assert all(b <= a for a, b in zip(sol.damping_history, sol.damping_history[1:]))


def test_max_iter_returns_best_or_raises():
    problem = builtin("lq_mean", {"a": 0.5})
    mu = gaussian_measure(100, 1.0, 0.4, seed=4)
    params = SolveParams(nx=101, nt=50, bounds=((-4.0, 4.0),), max_iter=1, initial="static")
    sol = solve(problem, mu, params)
    assert not sol.converged and sol.iterations == 1
    with pytest.raises(MaxIterExceeded) as info:
        solve(problem, mu, params, strict=True)
    assert info.value.solution.iterations == 1


def test_user_initial_flow_must_match():
    problem = builtin("quadratic")
    mu = gaussian_measure(10, 0.0, 1.0, seed=0)
    wrong = MeasureFlow.static(gaussian_measure(10, 1.0, 1.0, seed=0), 1.0, FAST.nt)
    with pytest.raises(ValueError):
        solve(problem, mu, FAST, initial_flow=wrong)


def test_stability_identical_initials():
    mu = gaussian_measure(80, 0.0, 0.5, seed=5)
    rep = stability_experiment(builtin("lq_mean", {"a": 0.5}), mu, mu, FAST)
    assert rep.zero_gap and rep.ratio == 0.0
    assert np.all(rep.w2_curve == 0) and np.all(rep.pairing_curve == 0) and rep.grad_gap == 0


def test_stability_quadratic_sharp():
    mu = gaussian_measure(150, 0.0, 0.5, seed=6)
    rep = stability_experiment(builtin("quadratic"), mu, mu.shifted(0.5), FAST)
    assert rep.sharp_flag and rep.ratio <= 1 + 1e-3
    assert rep.initial_gap == pytest.approx(0.5)


def test_stability_lq_mean_terminal_shift():
    mu = gaussian_measure(150, 0.0, 0.5, seed=7)
    rep = stability_experiment(builtin("lq_mean", {"a": 0.0}), mu, mu.shifted(1.0), FAST)
    assert rep.w2_curve[-1] == pytest.approx(0.5, abs=0.02)


def test_pairing_along_flows_monotone():
    mu = gaussian_measure(150, 0.0, 0.5, seed=8)
    rep = stability_experiment(builtin("lq_mean", {"a": 0.5}), mu, mu.shifted(0.5), FAST)
    grid = rep.solutions[0].grid
    check = rep.pairing_check(pairing_tolerance(grid, 150))
    assert check["nonnegative"] and check["nonincreasing"]


def test_stability_curve_export(tmp_path):
    mu = gaussian_measure(40, 0.0, 0.5, seed=9)
    rep = stability_experiment(builtin("quadratic"), mu, mu.shifted(0.25), FAST)
    text = rep.write_curves(tmp_path / "c.csv").read_text().splitlines()
    assert text[0] == "t,w2,grad_gap,pairing" and len(text) == FAST.nt + 2
    sol = rep.solutions[0]
    assert sol.write_residuals(tmp_path / "r.csv").read_text().startswith("iteration,residual,damping")


@pytest.mark.parametrize("delta", [1.0, 0.25])
def test_gradient_gap_lq_mean(delta):
    # D_xg = x - a m_T and m_T = m0 / (1 + (1 - a) T) give sup gap a delta / (1 + (1 - a) T)
    a = 0.5
    mu = gaussian_measure(200, 0.0, 0.5, seed=3)
    rep = stability_experiment(builtin("lq_mean", {"a": a}), mu, mu.shifted(delta), FAST)
    assert rep.grad_ratio == pytest.approx(a / (1 + (1 - a)), abs=0.01)
    assert rep.ratio == pytest.approx(1.0, abs=1e-3)


def test_stability_independent_of_threads():
    mu = gaussian_measure(60, 0.0, 0.5, seed=10)
    problem = builtin("lq_mean", {"a": 0.5})
    one = stability_experiment(problem, mu, mu.shifted(0.5), FAST)
    two = stability_experiment(problem, mu, mu.shifted(0.5), replace(FAST, threads=2))
    np.testing.assert_array_equal(one.w2_curve, two.w2_curve)
    np.testing.assert_array_equal(one.pairing_curve, two.pairing_curve)
