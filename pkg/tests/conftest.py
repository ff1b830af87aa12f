import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from snell.numkit import RngStream, randn

# First calls pay numba compile time, so per-example deadlines are meaningless.
settings.register_profile("snell", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("snell")


@pytest.fixture
def gauss():
    """``gauss(seed, rows, cols)``: deterministic standard-normal matrix."""

    def make(seed, rows, cols, std=1.0):
        return randn(RngStream(seed), rows, cols, std)

    return make


@pytest.fixture
def np_rng():
    return np.random.default_rng(12345)
