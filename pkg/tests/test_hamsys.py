from dataclasses import replace

import numpy as np
import pytest

from mfgkit.errors import ShootingDiverged
from mfgkit.flow import MeasureFlow
from mfgkit.hamsys import (characteristic_pairing, consistency_check, reversibility_defect,
                           shoot, shoot_many)
from mfgkit.measures import gaussian_measure
from mfgkit.mfg import SolveParams, solve, stability_experiment
from mfgkit.model import TerminalCost, builtin

FAST = SolveParams(nx=101, nt=50, bounds=((-4.0, 4.0),))


def static_flow(n=20, mean=0.0, nt=50):
    return MeasureFlow.static(gaussian_measure(n, mean, 0.5, seed=0), 1.0, nt)


def test_quadratic_costate_closed_form():
    path = shoot(builtin("quadratic"), static_flow(), [1.0])
    # Y0 = -x0 / (1 + T); the path is a straight line to x0 / (1 + T)
    assert path.y0[0] == pytest.approx(-0.5, abs=1e-6)
    assert path.X[-1, 0] == pytest.approx(0.5, abs=1e-6)
    assert path.residual <= 1e-10
    np.testing.assert_allclose(path.Y[:, 0], -0.5, atol=1e-6)


def test_linear_terminal_cost():
    b = 0.7
    g = TerminalCost(lambda x, mu: b * x.sum(axis=1),
                     lambda x, mu: np.full_like(x, b), abs(b))
    problem = builtin("quadratic").with_terminal(g)
    x0 = np.linspace(-1, 1, 5)[:, None]
    for p in shoot_many(problem, static_flow(), x0, y0_guess=np.zeros_like(x0)):
        np.testing.assert_allclose(p.Y[:, 0], -b, atol=1e-9)
        assert p.X[-1, 0] == pytest.approx(p.x0[0] - b, abs=1e-9)


def test_shoot_single_point_only():
    with pytest.raises(ValueError):
        shoot(builtin("quadratic"), static_flow(), [[0.0], [1.0]])


def test_non_finite_terminal_gradient_diverges():
    g = TerminalCost(lambda x, mu: x.sum(axis=1),
                     lambda x, mu: np.full_like(x, np.inf), 1.0)
    with pytest.raises(ShootingDiverged):
        shoot(builtin("quadratic").with_terminal(g), static_flow(), [0.3])


def test_iteration_cap_raises(monkeypatch):
    import mfgkit.hamsys as hs
    monkeypatch.setattr(hs, "MAX_SHOOTING_ITER", 2)
    # Y_T = -100 sin(100 X_T) has a wildly oscillating root function
    g = TerminalCost(lambda x, mu: -np.cos(100 * x).sum(axis=1),
                     lambda x, mu: 100 * np.sin(100 * x), 100.0)
    with pytest.raises(ShootingDiverged, match="did not converge"):
        shoot(builtin("quadratic").with_terminal(g), static_flow(), [0.3], tol=1e-14)


def test_reversibility():
    problem = builtin("lq_mean", {"a": 0.5})
    flow = static_flow(mean=1.0)
    for p in shoot_many(problem, flow, [[0.0], [1.5], [-2.0]]):
        assert reversibility_defect(problem, flow, p) <= 1e-6


@pytest.fixture(scope="module")
def lq_solution():
    problem = builtin("lq_mean", {"a": 0.5})
    sol = solve(problem, gaussian_measure(200, 1.0, 0.5, seed=1), FAST)
    assert sol.converged
    return problem, sol


def test_consistency_quadratic():
    problem = builtin("quadratic")
    sol = solve(problem, gaussian_measure(100, 0.0, 0.7, seed=2), FAST)
    rep = consistency_check(problem, sol, n_probe=20)
    assert rep.n_probe == 20 and rep.passed
    assert rep.max_defect <= rep.threshold


def test_consistency_lq_mean(lq_solution):
    problem, sol = lq_solution
    rep = consistency_check(problem, sol, n_probe=25, seed=3)
    assert rep.passed and len(rep.defects) == 25
    assert rep.worst["defect"] == rep.max_defect


def test_characteristic_tracks_population(lq_solution):
    problem, sol = lq_solution
    idx = [0, 50, 199]
    flow = sol.flow
    paths = shoot_many(problem, flow, flow.positions[0][idx])
    tol = 10 * (sol.grid.dx[0] + sol.grid.dt)
    for i, p in zip(idx, paths):
        assert np.max(np.abs(p.X[:, 0] - flow.positions[:, i, 0])) <= tol


def test_empty_probe_set(lq_solution):
    problem, sol = lq_solution
    rep = consistency_check(problem, sol, n_probe=0)
    assert rep.passed and rep.n_probe == 0 and rep.worst is None


def test_corrupted_gradient_fails(lq_solution):
    problem, sol = lq_solution
    bad = replace(sol.value, du=sol.value.du + 1.0)
    corrupted = replace(sol, value=bad)
    rep = consistency_check(problem, corrupted, n_probe=10)
    assert not rep.passed
    assert rep.worst["defect"] > rep.threshold


def test_pairing_matches_stability_curve():
    problem = builtin("lq_mean", {"a": 0.5})
    mu = gaussian_measure(60, 0.0, 0.5, seed=4)
    rep = stability_experiment(problem, mu, mu.shifted(0.5), FAST)
    f1, f2 = rep.solutions[0].flow, rep.solutions[1].flow
    curve = characteristic_pairing(problem, f1, f2, f1.positions[0], f2.positions[0])
    grid = rep.solutions[0].grid
    assert np.max(np.abs(curve - rep.pairing_curve)) <= 10 * (grid.dx[0] + grid.dt)


def test_path_export(tmp_path):
    path = shoot(builtin("quadratic"), static_flow(), [1.0])
    lines = path.write(tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "t,X0,Y0" and len(lines) == 52
    t, x, y = map(float, lines[-1].split(","))
    assert (t, x, y) == pytest.approx((1.0, 0.5, -0.5), abs=1e-6)
