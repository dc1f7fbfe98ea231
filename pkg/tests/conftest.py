import numpy as np
import pytest

from stainssl import tensor as T
from stainssl.rng import SplitMix


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running desk-scale runs")


@pytest.fixture
def rng():
    return SplitMix(1234, 7)


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


def numeric_grad(f, arr, h=1e-6):
    """Plain central differences over every coordinate of ``arr`` (modified in place)."""
    out = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out
