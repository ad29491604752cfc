import numpy as np
import pytest

from mople import Dataset
from mople.simulation import generate, get_scenario


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def case3_small():
    return generate(get_scenario("CaseIII"), 200, np.random.default_rng(7))


def partial_linear_data(n, seed, beta=(1.5, -2.0), noise=0.3):
    """Single-population ``y = X beta + sin(2 pi u) + e``."""
    r = np.random.default_rng(seed)
    X = r.uniform(size=(n, len(beta)))
    u = r.uniform(size=n)
    y = X @ np.asarray(beta) + np.sin(2 * np.pi * u) + noise * r.standard_normal(n)
    return Dataset(y, X, u)
