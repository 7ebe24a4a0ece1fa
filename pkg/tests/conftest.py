import itertools

import numpy as np
import pytest

from mfgkit.measures import ParticleMeasure


def brute_force_cost(x: np.ndarray, y: np.ndarray, order: int) -> float:
    """Minimum of mean |x_i - y_s(i)|^order over all permutations (independent oracle)."""
    n = len(x)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        d = np.linalg.norm(x - y[list(perm)], axis=1)
        best = min(best, float(np.mean(d**order)))
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def dirac0():
    return ParticleMeasure(np.zeros((1, 1)))
