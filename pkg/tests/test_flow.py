import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfgkit.errors import BlowUp
from mfgkit.flow import (
    MeasureFlow,
    audit_flow,
    growth_bound,
    integrate_flow,
    moment2_bound,
    velocity_from_value,
)
from mfgkit.hjb import SpaceTimeGrid, ValueField, solve_hjb
from mfgkit.measures import ParticleMeasure, from_samples, gaussian_measure, wasserstein
from mfgkit.model import builtin


@pytest.fixture(scope="module")
def quadratic_field():
    problem = builtin("quadratic")
    grid = SpaceTimeGrid(((-3, 3),), 121, 60, 1.0)
    rho = MeasureFlow.static(from_samples([[0.0]]), 1.0, 60)
    return problem, rho, solve_hjb(problem, rho, grid)


def test_velocity_quadratic(quadratic_field):
    problem, rho, field = quadratic_field
    V = velocity_from_value(problem, field, rho)
    x = np.linspace(-2, 2, 9)[:, None]
    for t in (0.0, 0.37, 1.0):
        np.testing.assert_allclose(V(t, x), -x / (2 - t), atol=0.05)
    assert V.out_of_domain == 0
    V(0.0, np.array([[10.0]]))
    assert V.out_of_domain == 1


def test_velocity_zero_gradient(quadratic_field):
    problem, rho, field = quadratic_field
    flat = ValueField(field.grid, np.zeros_like(field.u), np.zeros_like(field.du), np.zeros_like(field.d2u), 1.0)
    dm = builtin("displacement_model")
    V = velocity_from_value(dm, flat, rho)
    x = np.linspace(-1, 1, 5)[:, None]
    np.testing.assert_allclose(V(0.5, x), dm.hamiltonian.grad_p(x, np.zeros_like(x), rho.at(0.5)))


def test_velocity_lq_mean():
    a, m0 = 0.5, 1.0
    problem = builtin("lq_mean", {"a": a})
    mu = gaussian_measure(100, m0, 0.3, seed=1)
    grid = SpaceTimeGrid(((-3, 3),), 121, 60, 1.0)
    rho = MeasureFlow.static(mu, 1.0, 60)
    V = velocity_from_value(problem, solve_hjb(problem, rho, grid), rho)
    x = np.linspace(-2, 2, 9)[:, None]
    # the static flow has terminal mean m0
    np.testing.assert_allclose(V(0.25, x), -(x - a * m0) / (2 - 0.25), atol=0.05)


def test_velocity_lipschitz_bound(quadratic_field):
    problem, rho, field = quadratic_field
    V = velocity_from_value(problem, field, rho)
    x = np.linspace(-2, 2, 201)[:, None]
    v = V(0.5, x)[:, 0]
    slope = np.max(np.abs(np.diff(v) / np.diff(x[:, 0])))
    assert slope <= V.lipschitz_bound() + 1e-9


def test_velocity_needs_shared_grid(quadratic_field):
    problem, _, field = quadratic_field
    with pytest.raises(ValueError):
        velocity_from_value(problem, field, MeasureFlow.static(from_samples([[0.0]]), 1.0, 30))


def test_zero_velocity_keeps_measure():
    mu = gaussian_measure(20, 0.0, 1.0, seed=3)
    flow = integrate_flow(lambda t, x: np.zeros_like(x), mu, 10, 1.0)
    for m in flow.measures:
        np.testing.assert_array_equal(m.points, mu.points)


def test_linear_decay():
    flow = integrate_flow(lambda t, x: -x, from_samples([[1.0]]), 100, 1.0)
    assert flow.positions[-1, 0, 0] == pytest.approx(np.exp(-1.0), abs=1e-6)


def test_constant_velocity_lipschitz():
    c = 0.7
    mu = gaussian_measure(30, 0.0, 1.0, seed=0)
    flow = integrate_flow(lambda t, x: np.full_like(x, c), mu, 20, 1.0)
    for k, j in [(0, 20), (3, 11), (5, 6)]:
        w1 = wasserstein(1, flow.measures[k], flow.measures[j])
        assert w1 == pytest.approx(c * abs(flow.times[k] - flow.times[j]), abs=1e-12)
    assert flow.lipschitz_constant() == pytest.approx(c, rel=1e-9)


def test_blow_up():
    with pytest.raises(BlowUp):
        integrate_flow(lambda t, x: x**2, from_samples([[5.0]]), 50, 1.0, domain_bound=2.0)
    with pytest.raises(BlowUp):
        integrate_flow(lambda t, x: np.full_like(x, np.inf), from_samples([[0.0]]), 5, 1.0)


def test_step_halving_ratio():
    V = lambda t, x: np.sin(x) - 0.5 * x * np.cos(t)
    mu = from_samples([[0.3], [1.2], [-2.0]])
    ends = [integrate_flow(V, mu, nt, 1.0).positions[-1] for nt in (10, 20, 40)]
    ratio = np.max(np.abs(ends[0] - ends[1])) / np.max(np.abs(ends[1] - ends[2]))
    assert 8 <= ratio <= 24


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 2.0), st.integers(0, 1000))
def test_growth_and_index_coupling(cv, seed):
    mu = gaussian_measure(15, 0.0, 1.0, seed=seed, dim=2)
    # |V| <= cv (|x| + 1) / 2 <= cv (1 + |x|)
    def V(t, x):
        r = np.linalg.norm(x, axis=1, keepdims=True)
        return cv * np.cos(3 * t) * (x + x / (1 + r)) / 2

    flow = integrate_flow(V, mu, 40, 1.0)
    rep = audit_flow(flow, cv)
    assert rep.growth_ok
    assert rep.m2_max <= rep.m2_bound
    for k in (10, 40):
        moved = np.sqrt(np.mean(np.sum((flow.positions[k] - flow.positions[0]) ** 2, axis=1)))
        assert wasserstein(2, flow.measures[0], flow.measures[k]) <= moved + 1e-12


def test_growth_bound_formula():
    assert growth_bound(1.0, 0.0, 3.0) == 1.0
    assert growth_bound(0.0, 1.0, 1.0) == pytest.approx(np.e)
    assert moment2_bound(1.0, 0.0, 1.0) == pytest.approx(np.sqrt(2))


def test_flow_validation_and_interpolation():
    pos = np.stack([np.zeros((3, 1)), np.ones((3, 1)), 2 * np.ones((3, 1))])
    flow = MeasureFlow(np.array([0.0, 0.5, 1.0]), pos)
    np.testing.assert_allclose(flow.positions_at(0.25), 0.5)
    assert flow.at(0.5) is flow.measures[1]
    with pytest.raises(ValueError):
        MeasureFlow(np.array([0.0, 0.2, 1.0]), pos)
    with pytest.raises(ValueError):
        MeasureFlow(np.array([0.0, 1.0]), pos)
    bad = pos.copy()
    bad[1, 0, 0] = np.nan
    with pytest.raises(ValueError):
        MeasureFlow(np.array([0.0, 0.5, 1.0]), bad)


def test_flow_export(tmp_path):
    flow = MeasureFlow.static(from_samples([[0.0, 1.0], [2.0, 3.0]]), 1.0, 3)
    manifest = json.loads(flow.write(tmp_path).read_text())
    assert manifest["files"] == ["rho_t0.csv", "rho_t1.csv", "rho_t2.csv", "rho_t3.csv"]
    assert (tmp_path / "rho_t2.csv").read_text().startswith("x0,x1\n")
