import numpy as np
import pytest

from homogenization.errors import EventBudgetExceeded, InvalidParams, PreconditionViolated, RateOverflow
from homogenization.simulator import (check_mm1_embedding, check_state, pathwise_checks, simulate,
                                      simulate_birth_death, simulate_closed_coupling, simulate_coupled_pair,
                                      simulate_labelled, simulate_triple, value_at)
from homogenization.state import ARRIVAL, DEPARTURE, MIGRATION, NetworkParams
from homogenization.utils import RngStream


def test_same_stream_same_path(cycle, subcritical3):
    a = simulate(subcritical3, cycle, [3, 1, 2], 5.0, RngStream(7, (1, 2)))
    b = simulate(subcritical3, cycle, [3, 1, 2], 5.0, RngStream(7, (1, 2)))
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.states, b.states)
    c = simulate(subcritical3, cycle, [3, 1, 2], 5.0, RngStream(7, (1, 3)))
    assert not np.array_equal(a.times, c.times)


def test_path_invariants(cycle, subcritical3, stream):
    traj = simulate(subcritical3, cycle, [4, 0, 2], 10.0, stream)
    assert traj.event_violations() == 0
    assert np.all(np.diff(traj.times) > 0)
    assert traj.times[-1] <= traj.horizon == 10.0
    assert set(np.unique(traj.kinds[1:])) <= {ARRIVAL, DEPARTURE, MIGRATION}
    assert not traj.truncated and not traj.stopped


def test_closed_network_keeps_population(cycle, stream):
    params = NetworkParams([0.5, 0.5, 0.5], [1.0, 1.0, 1.0]).closed()
    traj = simulate(params, cycle, [5, 0, 7], 3.0, stream)
    assert np.all(traj.totals() == 12)
    assert np.all(traj.kinds[1:] == MIGRATION)


def test_empty_closed_network_has_no_events(symmetric, stream):
    params = NetworkParams([0.0, 0.0], [1.0, 1.0])
    traj = simulate(params, symmetric, [0, 0], 4.0, stream)
    assert traj.num_events == 0
    np.testing.assert_array_equal(traj.final, [0, 0])


def test_bad_inputs(symmetric, subcritical2, stream):
    with pytest.raises(PreconditionViolated):
        simulate(subcritical2, symmetric, [1, 1], 0.0, stream)
    with pytest.raises(PreconditionViolated):
        simulate(subcritical2, symmetric, [1, -1], 1.0, stream)
    with pytest.raises(PreconditionViolated):
        check_state([1, 2, 3], 2)
    with pytest.raises(PreconditionViolated):
        check_state([1.5, 2], 2)


def test_event_budget(symmetric, supercritical2, stream):
    traj = simulate(supercritical2, symmetric, [5, 5], 100.0, stream, max_events=5)
    assert traj.truncated
    assert traj.num_events == 5
    assert traj.horizon == traj.times[-1]
    with pytest.raises(EventBudgetExceeded):
        simulate(supercritical2, symmetric, [5, 5], 100.0, stream, max_events=5, strict=True)


def test_rate_guard(symmetric, supercritical2, stream):
    with pytest.raises(RateOverflow):
        simulate(supercritical2, symmetric, [50, 50], 1.0, stream, max_rate=10.0)


def test_stop_rule_ends_path(symmetric, supercritical2, stream):
    traj = simulate(supercritical2, symmetric, [0, 0], 1000.0, stream, stop=lambda x: sum(x) >= 3)
    assert traj.stopped
    assert traj.final.sum() == 3
    assert traj.horizon == traj.times[-1]


def test_stop_rule_at_start(symmetric, supercritical2, stream):
    traj = simulate(supercritical2, symmetric, [2, 2], 10.0, stream, stop=lambda x: True)
    assert traj.stopped
    assert traj.num_events == 0
    assert traj.horizon == 0.0


def test_birth_death_walk(stream):
    times, values = simulate_birth_death(1.0, 2.0, 5, 20.0, stream)
    assert times[0] == 0.0 and values[0] == 5
    assert np.all(values >= 0)
    assert np.all(np.abs(np.diff(values)) == 1)
    assert value_at(times, values, 0.0) == 5


def test_triple_decomposition(cycle, subcritical3, stream):
    tp = simulate_triple(subcritical3, cycle, [2, 0, 1], 6.0, stream)
    assert all(v == 0 for v in tp.violations().values())
    report = check_mm1_embedding(tp)
    assert report.passed
    assert tp.x_trajectory().event_violations() == 0


def test_coupled_pair_dominance(cycle, subcritical3, stream):
    pair = simulate_coupled_pair(subcritical3, cycle, [4, 2, 3], [1, 2, 0], 5.0, stream)
    assert all(v == 0 for v in pair.violations().values())
    upper, lower = pair.trajectories()
    assert upper.event_violations() == 0
    assert lower.event_violations() == 0


def test_closed_coupling_sandwich(cycle, subcritical3, stream):
    coupling = simulate_closed_coupling(subcritical3, cycle, [3, 3, 3], 4.0, stream)
    assert all(v == 0 for v in coupling.violations().values())


def test_closed_coupling_drops_killed_arrivals(cycle, stream):
    params = NetworkParams([1.0, 1.0, 1.0], [2.0, 2.0, 2.0])
    coupling = simulate_closed_coupling(params, cycle, [2, 2, 2], 30.0, stream)
    live = coupling.x.sum(axis=1)
    assert coupling.tracked[0] == 6
    assert np.all(coupling.tracked <= live + 6)
    assert np.all(coupling.tracked >= 6)
    # arrivals far outnumber the bag at the end, so killed ones were let go
    assert coupling.n_lambda[-1] > coupling.tracked[-1] - 6 + 10
    assert coupling.violations()["tracked_overflow"] == 0


def test_labelled_particles_match_aggregate(cycle, stream):
    params = NetworkParams([0.5, 0.5, 0.5], [0.0, 0.0, 0.0])
    paths = simulate_labelled(params, cycle, [2, 1, 0], 3.0, stream)
    agg = paths.aggregate
    assert agg.event_violations() == 0
    counts = np.zeros(3, dtype=np.int64)
    for k in range(len(paths.birth_times)):
        node = paths.node_at(k, 3.0)
        if node >= 0:
            counts[node] += 1
    np.testing.assert_array_equal(counts, agg.final)


def test_labelled_needs_zero_capacity(cycle, subcritical3, stream):
    with pytest.raises(InvalidParams):
        simulate_labelled(subcritical3, cycle, [1, 1, 1], 1.0, stream)


def test_pathwise_checks_pass(symmetric, subcritical2, stream):
    report = pathwise_checks(subcritical2, symmetric, stream, paths=25, horizon=1.5, max_initial=5)
    assert report.passed
    assert report.as_dict()["paths"] == 25
