import numpy as np
import pytest

from homogenization.spectral import rate_matrix, validate, random_rate_matrix
from homogenization.state import NetworkParams
from homogenization.utils import RngStream


@pytest.fixture
def symmetric():
    """Two nodes swapping at rate 1: pi = (1/2, 1/2), theta = 2, eta = 2."""
    return validate(rate_matrix([[None, 1.0], [1.0, None]]))


@pytest.fixture
def lopsided():
    """Two nodes with pi = (1/3, 2/3), theta = eta = 3."""
    return validate(rate_matrix([[None, 2.0], [1.0, None]]))


@pytest.fixture
def cycle():
    """Directed 3-cycle at rate 1: complex eigenvalues, eta = 3/2."""
    return validate(rate_matrix([[None, 1.0, 0.0], [0.0, None, 1.0], [1.0, 0.0, None]]))


@pytest.fixture
def random_spectral():
    def make(n, seed=0):
        return validate(random_rate_matrix(n, np.random.default_rng(seed)))
    return make


@pytest.fixture
def subcritical2():
    return NetworkParams([0.5, 0.5], [1.0, 1.0])


@pytest.fixture
def supercritical2():
    return NetworkParams([1.0, 1.0], [0.5, 0.5])


@pytest.fixture
def subcritical3():
    return NetworkParams([0.4, 0.3, 0.3], [0.7, 0.7, 0.6])


@pytest.fixture
def stream():
    return RngStream(2024)
