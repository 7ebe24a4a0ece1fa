import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import brute_force_cost
from mfgkit.errors import (
    DimensionMismatch,
    EmptyInput,
    NonFiniteCoordinate,
    SizeMismatch,
    TooLargeForExactAssignment,
    UnsupportedOrder,
)
from mfgkit.measures import (
    Coupling,
    ParticleMeasure,
    from_samples,
    gaussian_measure,
    index_coupling_distance,
    moment2,
    optimal_coupling,
    pushforward,
    read_csv,
    wasserstein,
    write_csv,
)


def test_from_samples_echoes_points():
    mu = from_samples([[0.0], [1.0]])
    assert (mu.n, mu.dim) == (2, 1)
    nu = from_samples([[1, 2], [3, 4], [5, 6]])
    assert (nu.n, nu.dim) == (3, 2)
    np.testing.assert_array_equal(nu.points, [[1, 2], [3, 4], [5, 6]])


@pytest.mark.parametrize("bad, err", [
    ([[0], [np.nan]], NonFiniteCoordinate),
    ([[0], [np.inf]], NonFiniteCoordinate),
    ([], EmptyInput),
    ([[0, 1], [2]], DimensionMismatch),
])
def test_from_samples_errors(bad, err):
    with pytest.raises(err):
        from_samples(bad)


def test_points_are_read_only():
    mu = from_samples([[0.0], [1.0]])
    with pytest.raises(ValueError):
        mu.points[0, 0] = 5.0


@pytest.mark.parametrize("pts, expected", [
    ([[0.0]], 0.0),
    ([[-1.0], [1.0]], 1.0),
    ([[3.0], [4.0]], np.sqrt(12.5)),
])
def test_moment2(pts, expected):
    assert moment2(from_samples(pts)) == pytest.approx(expected, abs=1e-15)


def test_pushforward_examples():
    mu = from_samples([[0.0], [2.0]])
    np.testing.assert_array_equal(pushforward(mu, lambda x: x).points, mu.points)
    np.testing.assert_array_equal(pushforward(mu, lambda x: x + 3).points, [[3.0], [5.0]])
    np.testing.assert_array_equal(pushforward(mu, lambda x: x**2).points, [[0.0], [4.0]])
    np.testing.assert_array_equal(pushforward(mu, lambda x: 2 * x, vectorized=True).points, [[0.0], [4.0]])
    with pytest.raises(NonFiniteCoordinate):
        pushforward(mu, lambda x: np.full_like(x, np.nan) if x[0] == 0 else x)


def test_optimal_coupling_small_example():
    c = optimal_coupling(from_samples([[0.0], [2.0]]), from_samples([[5.0], [1.0]]))
    np.testing.assert_array_equal(c.pairing, [1, 0])
    assert c.cost2 == pytest.approx(5.0, abs=1e-15)


def test_wasserstein_examples():
    a, b = from_samples([[0.0], [2.0]]), from_samples([[1.0], [5.0]])
    assert wasserstein(2, a, b) == pytest.approx(np.sqrt(5.0), abs=1e-14)
    assert wasserstein(1, a, b) == pytest.approx(2.0, abs=1e-14)
    zero, one = from_samples([[0.0]] * 3), from_samples([[1.0]] * 3)
    assert wasserstein(1, zero, one) == pytest.approx(1.0)
    assert wasserstein(2, zero, one) == pytest.approx(1.0)
    assert wasserstein(2, a, a) == 0.0


def test_identical_measures_zero_cost(rng):
    mu = ParticleMeasure(rng.normal(size=(30, 2)))
    assert optimal_coupling(mu, mu).cost2 == pytest.approx(0.0, abs=1e-14)


def test_errors():
    a1, a2 = from_samples([[0.0], [1.0]]), from_samples([[0.0, 1.0], [1.0, 2.0]])
    with pytest.raises(DimensionMismatch):
        wasserstein(2, a1, a2)
    with pytest.raises(SizeMismatch):
        wasserstein(2, a1, from_samples([[0.0]]))
    with pytest.raises(UnsupportedOrder):
        wasserstein(3, a1, a1)
    big = ParticleMeasure(np.zeros((513, 2)))
    with pytest.raises(TooLargeForExactAssignment):
        optimal_coupling(big, big)
    # one dimension has no size limit
    line = ParticleMeasure(np.arange(5000.0))
    assert wasserstein(2, line, line.shifted(1.0)) == pytest.approx(1.0)


def test_coupling_rejects_non_permutation():
    with pytest.raises(ValueError):
        Coupling(np.array([0, 0]), 1.0)


def test_cost2_matches_recomputation(rng):
    x, y = rng.normal(size=(40, 2)), rng.normal(size=(40, 2))
    c = optimal_coupling(ParticleMeasure(x), ParticleMeasure(y))
    recomputed = np.mean(np.sum((x - y[c.pairing]) ** 2, axis=1))
    assert abs(c.cost2 - recomputed) <= 1e-12 * recomputed


def _cloud(dim, n):
    return arrays(np.float64, (n, dim), elements=st.floats(-10, 10, allow_nan=False, width=64))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 2), st.integers(1, 7), st.data())
def test_wasserstein_equals_permutation_minimum(dim, n, data):
    x = data.draw(_cloud(dim, n))
    y = data.draw(_cloud(dim, n))
    mu, nu = ParticleMeasure(x), ParticleMeasure(y)
    for order in (1, 2):
        oracle = brute_force_cost(x, y, order) ** (1 / order)
        assert wasserstein(order, mu, nu) == pytest.approx(oracle, abs=1e-10, rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 2), st.integers(1, 12), st.data())
def test_symmetry_triangle_and_translation(dim, n, data):
    x, y, z = (ParticleMeasure(data.draw(_cloud(dim, n))) for _ in range(3))
    c = np.array(data.draw(st.lists(st.floats(-5, 5), min_size=dim, max_size=dim)))
    for p in (1, 2):
        assert wasserstein(p, x, y) == pytest.approx(wasserstein(p, y, x), abs=1e-10)
        assert wasserstein(p, x, z) <= wasserstein(p, x, y) + wasserstein(p, y, z) + 1e-10
    assert wasserstein(2, x, x.shifted(c)) == pytest.approx(np.linalg.norm(c), abs=1e-12 * (1 + np.linalg.norm(c)) + 1e-12)
    assert wasserstein(2, x, y) <= index_coupling_distance(2, x, y) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.floats(-4, 4), st.data())
def test_moment2_scales(n, lam, data):
    mu = ParticleMeasure(data.draw(_cloud(2, n)))
    assert moment2(pushforward(mu, lambda x: lam * x, vectorized=True)) == pytest.approx(
        abs(lam) * moment2(mu), rel=1e-12, abs=1e-12)


def test_zero_distance_iff_same_multiset(rng):
    x = rng.normal(size=(10, 2))
    mu, perm = ParticleMeasure(x), ParticleMeasure(x[rng.permutation(10)])
    assert wasserstein(2, mu, perm) == pytest.approx(0.0, abs=1e-12)
    moved = x.copy()
    moved[3] += 1e-3
    assert wasserstein(2, mu, ParticleMeasure(moved)) > 0


def test_csv_round_trip(tmp_path, rng):
    mu = ParticleMeasure(rng.normal(size=(7, 3)))
    path = write_csv(mu, tmp_path / "m.csv")
    assert path.read_text().splitlines()[0] == "x0,x1,x2"
    np.testing.assert_array_equal(read_csv(path).points, mu.points)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_csv(tmp_path / "bad.csv")


def test_gaussian_measure_recentred():
    mu = gaussian_measure(500, [2.0, -1.0], 0.5, seed=4)
    np.testing.assert_allclose(mu.mean(), [2.0, -1.0], atol=1e-12)
    raw = gaussian_measure(500, 2.0, 0.5, seed=4, recentre=False)
    assert abs(raw.mean()[0] - 2.0) > 1e-6
