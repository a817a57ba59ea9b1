"""Occupancy states, empirical distribution, relative entropy and stopping times."""
import math
import logging
from dataclasses import dataclass, field
from itertools import combinations, islice

import numpy as np
from scipy.special import rel_entr

from .errors import DegenerateReference, CertificationFailed, InvalidParams

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-12
CERTIFICATION_TOL = 1e-12

SUPERCRITICAL = "supercritical"
SUBCRITICAL = "subcritical"
CRITICAL = "critical"
REGIMES = (SUPERCRITICAL, SUBCRITICAL, CRITICAL)

# event tags; INITIAL marks row 0 of every path
INITIAL, ARRIVAL, DEPARTURE, MIGRATION, VIRTUAL = -1, 0, 1, 2, 3
EVENT_NAMES = {INITIAL: "initial", ARRIVAL: "arrival", DEPARTURE: "departure",
               MIGRATION: "migration", VIRTUAL: "virtual"}
EVENT_CODES = {name: code for code, name in EVENT_NAMES.items()}


@dataclass(frozen=True, eq=False)
class NetworkParams:
    arrival_rates: np.ndarray
    capacities: np.ndarray

    def __post_init__(self):
        lam = np.array(self.arrival_rates, dtype=float)
        mu = np.array(self.capacities, dtype=float)
        if lam.shape != mu.shape or lam.ndim != 1:
            raise InvalidParams("arrival rates and capacities need one entry per node")
        if np.any(lam < 0) or np.any(mu < 0) or not (np.all(np.isfinite(lam)) and np.all(np.isfinite(mu))):
            raise InvalidParams("rates must be finite and non-negative")
        lam.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "arrival_rates", lam)
        object.__setattr__(self, "capacities", mu)

    @property
    def n(self):
        return self.arrival_rates.shape[0]

    @property
    def lam(self):
        return math.fsum(self.arrival_rates)

    @property
    def mu(self):
        return math.fsum(self.capacities)

    @property
    def regime(self):
        if math.isclose(self.lam, self.mu, rel_tol=1e-12, abs_tol=1e-15):
            return CRITICAL
        return SUPERCRITICAL if self.lam > self.mu else SUBCRITICAL

    def closed(self):
        """Same network with arrivals and departures switched off."""
        zeros = np.zeros(self.n)
        return NetworkParams(zeros, zeros)


def check_simplex_point(rho):
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0) or abs(rho.sum() - 1.0) > SIMPLEX_TOL:
        raise InvalidParams("not a probability vector: {}".format(rho))
    return rho


def chi(x):
    """Empirical distribution x/|x|, with the convention e_1 for the empty state."""
    x = np.asarray(x)
    total = x.sum()
    if total > 0:
        return x / total
    out = np.zeros(x.shape[0])
    out[0] = 1.0
    return out


def chi_rows(states):
    """chi applied to every row of a (K, n) array of states."""
    states = np.asarray(states)
    totals = states.sum(axis=1)
    out = np.zeros(states.shape, dtype=float)
    busy = totals > 0
    out[busy] = states[busy] / totals[busy, None]
    out[~busy, 0] = 1.0
    return out


def sup_norm(a, axis=-1):
    return np.abs(a).max(axis=axis)


def _check_reference(pi):
    pi = np.asarray(pi, dtype=float)
    if np.any(pi <= 0):
        raise DegenerateReference("reference distribution has a zero entry: {}".format(pi))
    return pi


def entropy(rho, pi):
    """H(rho, pi) = sum rho_i log(rho_i / pi_i); zero entries of rho contribute 0."""
    pi = _check_reference(pi)
    return float(math.fsum(rel_entr(np.asarray(rho, dtype=float), pi)))


def entropy_rows(rhos, pi):
    pi = _check_reference(pi)
    return rel_entr(np.asarray(rhos, dtype=float), pi[None, :]).sum(axis=1)


def simplex_grid(n, m, chunk=100000):
    """Yield the points k/m of P (k integer, |k| = m) in chunks of rows."""
    bars = combinations(range(m + n - 1), n - 1)
    while True:
        block = np.array(list(islice(bars, chunk)), dtype=np.int64).reshape(-1, n - 1)
        if block.shape[0] == 0:
            return
        padded = np.hstack([np.full((block.shape[0], 1), -1), block,
                            np.full((block.shape[0], 1), m + n - 1)])
        yield (np.diff(padded, axis=1) - 1) / m


def entropy_norm_constants(pi, step=0.01):
    """Return (C1, C2) and certify C1 |rho-pi|^2 <= H <= C2 |rho-pi|^2 on a grid of P."""
    pi = _check_reference(pi)
    n = pi.shape[0]
    C1, C2 = 0.5, n / pi.min()
    m = int(math.ceil(1.0 / step))
    checked = 0
    for rhos in simplex_grid(n, m):
        H = entropy_rows(rhos, pi)
        d2 = sup_norm(rhos - pi) ** 2
        low = np.flatnonzero(C1 * d2 > H + CERTIFICATION_TOL)
        high = np.flatnonzero(H > C2 * d2 + CERTIFICATION_TOL)
        if low.size or high.size:
            k = int(low[0] if low.size else high[0])
            raise CertificationFailed("bound violated at rho = {} (H = {:.6g}, |rho-pi|^2 = {:.6g})"
                                      .format(rhos[k], H[k], d2[k]))
        checked += rhos.shape[0]
    logger.debug("Certified C1=%.3g C2=%.3g on %d grid points", C1, C2, checked)
    return C1, C2


def epsilon_zero(pi):
    """(eps0_norm, eps0_entropy): thresholds whose exit times precede first emptiness."""
    pi = _check_reference(pi)
    eps_norm = pi.min() / 2.0
    return eps_norm, 0.5 * eps_norm ** 2


def generator_apply(params, Q, f, x):
    """(Omega f)(x) for the network generator: arrivals, processor-sharing departures, migrations."""
    x = np.asarray(x, dtype=np.int64)
    n = x.shape[0]
    base = f(x)
    terms = []
    for i in range(n):
        if params.arrival_rates[i] > 0:
            y = x.copy()
            y[i] += 1
            terms.append(params.arrival_rates[i] * (f(y) - base))
        if x[i] > 0 and params.capacities[i] > 0:
            y = x.copy()
            y[i] -= 1
            terms.append(params.capacities[i] * (f(y) - base))
        if x[i] > 0:
            for j in range(n):
                if j != i and Q[i, j] > 0:
                    y = x.copy()
                    y[i] -= 1
                    y[j] += 1
                    terms.append(Q[i, j] * x[i] * (f(y) - base))
    return math.fsum(terms)


@dataclass(eq=False)
class Trajectory:
    """Piecewise-constant jump path; row 0 is the initial state at time 0.

    ``from_node``/``to_node`` are 0-based, -1 where not applicable (arrivals
    have no source, departures no destination). ``marks`` optionally carries
    the Poisson stream (particle index) that fired each event.
    """
    times: np.ndarray
    states: np.ndarray
    kinds: np.ndarray
    from_node: np.ndarray
    to_node: np.ndarray
    horizon: float
    marks: np.ndarray = field(default=None)
    truncated: bool = False
    stopped: bool = False

    @property
    def n(self):
        return self.states.shape[1]

    @property
    def initial(self):
        return self.states[0]

    @property
    def final(self):
        return self.states[-1]

    @property
    def num_events(self):
        return self.times.shape[0] - 1

    def totals(self):
        return self.states.sum(axis=1)

    def index_at(self, t):
        return np.searchsorted(self.times, t, side="right") - 1

    def state_at(self, t):
        if t < 0 or t > self.horizon:
            raise ValueError("time {} outside [0, {}]".format(t, self.horizon))
        return self.states[self.index_at(t)]

    def states_at(self, times):
        times = np.asarray(times, dtype=float)
        if np.any(times < 0) or np.any(times > self.horizon):
            raise ValueError("times outside [0, {}]".format(self.horizon))
        return self.states[self.index_at(times)]

    def event_violations(self):
        """Count rows breaking the path invariants (ordering, event deltas, departures)."""
        bad = int(np.count_nonzero(np.diff(self.times) <= 0))
        bad += int(np.count_nonzero(self.states < 0))
        delta = np.diff(self.states, axis=0)
        expected = np.zeros_like(delta)
        rows = np.arange(delta.shape[0])
        kinds, frm, to = self.kinds[1:], self.from_node[1:], self.to_node[1:]
        has_to = to >= 0
        has_from = frm >= 0
        np.add.at(expected, (rows[has_to], to[has_to]), 1)
        np.add.at(expected, (rows[has_from], frm[has_from]), -1)
        bad += int(np.count_nonzero(np.any(delta != expected, axis=1)))
        bad += int(np.count_nonzero((kinds == ARRIVAL) & (has_from | ~has_to)))
        bad += int(np.count_nonzero((kinds == DEPARTURE) & (~has_from | has_to)))
        bad += int(np.count_nonzero((kinds == MIGRATION) & ~(has_from & has_to)))
        return bad


def replay(x0, times, kinds, from_node, to_node, horizon, marks=None, truncated=False):
    """Build a Trajectory from an initial state and an event log."""
    x0 = np.asarray(x0, dtype=np.int64)
    times = np.concatenate([[0.0], np.asarray(times, dtype=float)])
    kinds = np.concatenate([[INITIAL], np.asarray(kinds, dtype=np.int8)]).astype(np.int8)
    frm = np.concatenate([[-1], np.asarray(from_node, dtype=np.int64)])
    to = np.concatenate([[-1], np.asarray(to_node, dtype=np.int64)])
    delta = np.zeros((times.shape[0], x0.shape[0]), dtype=np.int64)
    rows = np.arange(times.shape[0])
    np.add.at(delta, (rows[to >= 0], to[to >= 0]), 1)
    np.add.at(delta, (rows[frm >= 0], frm[frm >= 0]), -1)
    states = x0[None, :] + np.cumsum(delta, axis=0)
    if marks is not None:
        marks = np.concatenate([[-1], np.asarray(marks, dtype=np.int64)])
    return Trajectory(times=times, states=states, kinds=kinds, from_node=frm, to_node=to,
                      horizon=float(horizon), marks=marks, truncated=truncated)


@dataclass(frozen=True)
class StoppingTimes:
    """First-passage times of one path; ``math.inf`` means censored at the horizon."""
    T_enter: float
    T_exit: float
    T_entropy: float
    T_empty: float
    horizon: float

    def censored(self, name):
        return math.isinf(getattr(self, name))

    def as_dict(self):
        return {"T_enter": self.T_enter, "T_exit": self.T_exit, "T_entropy": self.T_entropy,
                "T_empty": self.T_empty, "horizon": self.horizon}


def first_time(times, condition):
    hits = np.flatnonzero(condition)
    return float(times[hits[0]]) if hits.size else math.inf


def entropy_exit_time(traj, pi, eps):
    """inf{t : H(chi(t), pi) > eps} scanned over jump epochs."""
    return first_time(traj.times, entropy_rows(chi_rows(traj.states), pi) > eps)


def norm_enter_time(traj, pi, eps):
    """inf{t : |chi(t) - pi| <= eps}."""
    return first_time(traj.times, sup_norm(chi_rows(traj.states) - pi) <= eps)


def empty_time(traj):
    return first_time(traj.times, np.any(traj.states == 0, axis=1))


def stopping_times(traj, pi, eps):
    """Detect T_eps, T^eps, T_H^eps and T_0 on a piecewise-constant path."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    pi = _check_reference(pi)
    chis = chi_rows(traj.states)
    dist = sup_norm(chis - pi)
    H = entropy_rows(chis, pi)
    return StoppingTimes(T_enter=first_time(traj.times, dist <= eps),
                         T_exit=first_time(traj.times, dist > eps),
                         T_entropy=first_time(traj.times, H > eps),
                         T_empty=first_time(traj.times, np.any(traj.states == 0, axis=1)),
                         horizon=traj.horizon)


def rescan_stopping_times(traj, pi, eps):
    """Epoch-by-epoch rescan of ``stopping_times`` using the scalar helpers."""
    found = {"T_enter": math.inf, "T_exit": math.inf, "T_entropy": math.inf, "T_empty": math.inf}
    for t, x in zip(traj.times.tolist(), traj.states):
        rho = chi(x)
        dist = float(np.max(np.abs(rho - pi)))
        checks = {"T_enter": dist <= eps, "T_exit": dist > eps,
                  "T_entropy": entropy(rho, pi) > eps, "T_empty": bool(np.any(x == 0))}
        for name, hit in checks.items():
            if hit and math.isinf(found[name]):
                found[name] = t
        if not any(math.isinf(v) for v in found.values()):
            break
    return StoppingTimes(horizon=traj.horizon, **found)
