import numpy as np
import pytest

from conceptloop import numerics as nx


@pytest.fixture(autouse=True)
def _float64():
    # every test runs in 64-bit mode
    with nx.dtype_scope(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
