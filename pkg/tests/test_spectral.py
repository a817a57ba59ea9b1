import numpy as np
import pytest

from homogenization.errors import InvalidRateMatrix, NotIrreducible, RowSumViolation
from homogenization.spectral import (evolve_distribution, is_irreducible, mixing_constants, mixing_deviation,
                                     rate_matrix, semigroup, semigroup_grid, validate)


def test_symmetric_pair(symmetric):
    assert symmetric.n == 2
    np.testing.assert_allclose(symmetric.pi, [0.5, 0.5], atol=1e-14)
    assert symmetric.theta == pytest.approx(2.0)
    assert symmetric.eta == pytest.approx(2.0)
    # |P_t - pi| = e^{-2t} / 2 exactly, so B is the margin times 1/2
    assert symmetric.B == pytest.approx(0.55, rel=1e-9)
    np.testing.assert_allclose(symmetric.omega[:, -1], 1.0)


def test_lopsided_pair(lopsided):
    np.testing.assert_allclose(lopsided.pi, [1 / 3, 2 / 3], atol=1e-14)
    assert lopsided.theta == pytest.approx(3.0)
    assert lopsided.eta == pytest.approx(3.0)


def test_cycle_has_complex_pair(cycle):
    assert np.iscomplexobj(cycle.eigenvalues)
    assert cycle.eta == pytest.approx(1.5)
    assert cycle.theta == pytest.approx(3.0)
    np.testing.assert_allclose(cycle.pi, np.full(3, 1 / 3), atol=1e-12)


def test_semigroup_group_law(cycle):
    for s, t in [(0.3, 1.1), (-0.7, 0.2), (2.0, -1.5)]:
        np.testing.assert_allclose(semigroup(cycle, s) @ semigroup(cycle, t), semigroup(cycle, s + t), atol=1e-12)
    np.testing.assert_allclose(semigroup(cycle, 0.0), np.eye(3), atol=1e-13)
    np.testing.assert_allclose(semigroup(cycle, 0.8).sum(axis=1), 1.0, atol=1e-13)


def test_semigroup_grid_matches_pointwise(random_spectral):
    S = random_spectral(4, seed=3)
    times = np.array([0.0, 0.1, 0.5, 2.0])
    grid = semigroup_grid(S, times)
    for k, t in enumerate(times):
        np.testing.assert_allclose(grid[k], semigroup(S, t), atol=1e-12)


def test_evolve_distribution_limits(lopsided):
    rho = np.array([1.0, 0.0])
    rows = evolve_distribution(lopsided, rho, [0.0, 50.0])
    np.testing.assert_allclose(rows[0], rho, atol=1e-13)
    np.testing.assert_allclose(rows[1], lopsided.pi, atol=1e-12)


def test_mixing_bound_holds(random_spectral):
    S = random_spectral(3, seed=11)
    B, eta = mixing_constants(S)
    times = np.linspace(0.0, 5.0, 200)
    assert np.all(mixing_deviation(S, times) <= B * np.exp(-eta * times))


def test_rate_matrix_fills_diagonal():
    Q = rate_matrix([[None, 2.0, 1.0], [0.5, None, 0.5], [1.0, 1.0, None]])
    np.testing.assert_allclose(Q.sum(axis=1), 0.0)
    assert Q[0, 0] == -3.0


def test_rate_matrix_rejects_bad_input():
    with pytest.raises(TypeError):
        rate_matrix("not a matrix")
    with pytest.raises(InvalidRateMatrix):
        rate_matrix([[None, None], [1.0, None]])
    with pytest.raises(InvalidRateMatrix):
        rate_matrix([[None, 1.0], [1.0]])


@pytest.mark.parametrize("Q, error", [
    ([[-1.0, 1.0], [1.0, -0.5]], RowSumViolation),
    ([[0.0, 0.0], [1.0, -1.0]], NotIrreducible),
    ([[1.0, -1.0], [1.0, -1.0]], InvalidRateMatrix),
    ([[0.0]], InvalidRateMatrix),
    ([[np.nan, 0.0], [0.0, 0.0]], InvalidRateMatrix),
])
def test_validate_rejects(Q, error):
    with pytest.raises(error):
        validate(Q)


def test_is_irreducible():
    assert is_irreducible(np.array([[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0], [1.0, 0.0, -1.0]]))
    assert not is_irreducible(np.array([[-1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 1.0, -1.0]]))
