import math

import numpy as np
import pytest

from homogenization.errors import CertificationFailed, DegenerateReference, InvalidParams
from homogenization.state import (ARRIVAL, CRITICAL, DEPARTURE, MIGRATION, SUBCRITICAL, SUPERCRITICAL,
                                  NetworkParams, check_simplex_point, chi, chi_rows, entropy,
                                  entropy_norm_constants, entropy_rows, epsilon_zero, first_time,
                                  generator_apply, replay, rescan_stopping_times, simplex_grid, stopping_times)
from homogenization.simulator import simulate
from homogenization.utils import RngStream


def test_entropy_value():
    assert entropy([0.7, 0.3], [0.5, 0.5]) == pytest.approx(0.082282, abs=1e-6)
    assert entropy([0.5, 0.5], [0.5, 0.5]) == 0.0
    # zero entries of rho contribute nothing
    assert entropy([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2.0))


def test_entropy_rows_matches_scalar():
    pi = np.array([0.2, 0.3, 0.5])
    rhos = np.array([[0.2, 0.3, 0.5], [1.0, 0.0, 0.0], [0.1, 0.6, 0.3]])
    np.testing.assert_allclose(entropy_rows(rhos, pi), [entropy(r, pi) for r in rhos], atol=1e-15)


def test_entropy_degenerate_reference():
    with pytest.raises(DegenerateReference):
        entropy([0.5, 0.5], [1.0, 0.0])


def test_chi_conventions():
    np.testing.assert_allclose(chi([1, 3]), [0.25, 0.75])
    np.testing.assert_allclose(chi([0, 0, 0]), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(chi_rows(np.array([[0, 0], [2, 2]])), [[1.0, 0.0], [0.5, 0.5]])


def test_check_simplex_point():
    with pytest.raises(InvalidParams):
        check_simplex_point([0.5, 0.6])
    with pytest.raises(InvalidParams):
        check_simplex_point([1.2, -0.2])


def test_epsilon_zero():
    eps_norm, eps_entropy = epsilon_zero([0.5, 0.5])
    assert eps_norm == pytest.approx(0.25)
    assert eps_entropy == pytest.approx(0.03125)


def test_simplex_grid_points():
    points = np.vstack(list(simplex_grid(3, 4, chunk=5)))
    assert points.shape == (15, 3)
    np.testing.assert_allclose(points.sum(axis=1), 1.0)
    assert np.all(points >= 0)


@pytest.mark.parametrize("pi", [[0.5, 0.5], [0.2, 0.3, 0.5], [0.1, 0.2, 0.3, 0.4]])
def test_entropy_norm_constants(pi):
    C1, C2 = entropy_norm_constants(pi, step=0.05)
    assert C1 == 0.5
    assert C2 == pytest.approx(len(pi) / min(pi))


def test_entropy_norm_constants_flags_zero_reference():
    with pytest.raises(DegenerateReference):
        entropy_norm_constants([0.0, 1.0])


def test_certification_failure_is_named():
    assert issubclass(CertificationFailed, ValueError)


def test_network_params_regimes():
    assert NetworkParams([1.0, 1.0], [0.5, 0.5]).regime == SUPERCRITICAL
    assert NetworkParams([0.5, 0.5], [1.0, 1.0]).regime == SUBCRITICAL
    assert NetworkParams([0.3, 0.7], [0.5, 0.5]).regime == CRITICAL
    closed = NetworkParams([1.0, 2.0], [3.0, 4.0]).closed()
    assert closed.lam == 0.0 and closed.mu == 0.0


@pytest.mark.parametrize("lam, mu", [([1.0], [1.0, 1.0]), ([-1.0, 1.0], [1.0, 1.0]), ([1.0, np.inf], [1.0, 1.0])])
def test_network_params_rejects(lam, mu):
    with pytest.raises(InvalidParams):
        NetworkParams(lam, mu)


def test_generator_on_total_population(symmetric, subcritical2):
    total = lambda y: float(y.sum())
    # migrations keep |x|; arrivals add lambda, each occupied node removes mu_i
    assert generator_apply(subcritical2, symmetric.Q, total, [2, 0]) == pytest.approx(1.0 - 1.0)
    assert generator_apply(subcritical2, symmetric.Q, total, [2, 3]) == pytest.approx(1.0 - 2.0)
    assert generator_apply(subcritical2, symmetric.Q, total, [0, 0]) == pytest.approx(1.0)


def test_generator_migration_term(symmetric):
    closed = NetworkParams([0.0, 0.0], [0.0, 0.0])
    first = lambda y: float(y[0])
    # two particles on node 1 each leave at rate 1
    assert generator_apply(closed, symmetric.Q, first, [2, 0]) == pytest.approx(-2.0)


def make_path():
    return replay([1, 0], [0.5, 1.0, 1.5], [MIGRATION, DEPARTURE, ARRIVAL], [0, 1, -1], [1, -1, 0], 2.0)


def test_replay_and_lookup():
    traj = make_path()
    np.testing.assert_array_equal(traj.states, [[1, 0], [0, 1], [0, 0], [1, 0]])
    np.testing.assert_array_equal(traj.state_at(0.7), [0, 1])
    np.testing.assert_array_equal(traj.state_at(1.0), [0, 0])
    np.testing.assert_array_equal(traj.states_at([0.0, 2.0]), [[1, 0], [1, 0]])
    assert traj.num_events == 3
    assert traj.event_violations() == 0
    with pytest.raises(ValueError):
        traj.state_at(2.5)


def test_event_violations_detects_bad_kind():
    traj = make_path()
    traj.kinds[2] = ARRIVAL
    assert traj.event_violations() > 0


def test_first_time():
    times = np.array([0.0, 1.0, 2.0])
    assert first_time(times, np.array([False, True, True])) == 1.0
    assert math.isinf(first_time(times, np.zeros(3, dtype=bool)))


def test_stopping_times_agree_with_rescan():
    traj = make_path()
    pi = np.array([0.5, 0.5])
    fast = stopping_times(traj, pi, 0.1)
    slow = rescan_stopping_times(traj, pi, 0.1)
    assert fast.as_dict() == slow.as_dict()
    assert fast.T_empty == 0.0
    assert fast.censored("T_enter")


def test_entropy_exit_brackets_norm_exit_on_paths(cycle, subcritical3):
    C1, C2 = entropy_norm_constants(cycle.pi, step=0.05)
    eps = 0.173
    exits = []
    for seed in range(8):
        traj = simulate(subcritical3, cycle, [4, 4, 4], 20.0, RngStream(seed))
        T_norm = stopping_times(traj, cycle.pi, eps).T_exit
        T_low = stopping_times(traj, cycle.pi, C1 * eps ** 2).T_entropy
        T_high = stopping_times(traj, cycle.pi, C2 * eps ** 2).T_entropy
        assert T_low <= T_norm <= T_high
        exits.append(T_norm)
    assert any(0 < t < math.inf for t in exits)
