"""Exact jump-chain simulation of the network and of its coupling constructions.

All samplers use the direct method: total rate R(x), Exponential(R) holding
time, event picked proportionally to its rate. Rate totals are updated
incrementally for the touched nodes and re-summed exactly every
``RESUM_EVERY`` events.
"""
import math
import heapq
import logging
from array import array
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from .errors import InvalidParams, PreconditionViolated, RateOverflow, EventBudgetExceeded
from .state import (Trajectory, replay, INITIAL, ARRIVAL, DEPARTURE,
                    MIGRATION, VIRTUAL)

logger = logging.getLogger(__name__)

DEFAULT_MAX_EVENTS = 10 ** 8
DEFAULT_MAX_POPULATION = 10 ** 7
RESUM_EVERY = 1024

# triple-process components moved by a migration
X_PART, Y_PART, Z_PART = 0, 1, 2


def check_state(x, n):
    x = np.asarray(x)
    if x.shape != (n,):
        raise PreconditionViolated("state {} does not have {} entries".format(x.tolist(), n))
    if np.any(x < 0) or not np.all(np.equal(np.mod(x, 1), 0)):
        raise PreconditionViolated("state {} is not a vector of non-negative integers".format(x.tolist()))
    return x.astype(np.int64)


class _Tables:
    """Per-network lookup tables: cumulative rates and destination laws."""

    def __init__(self, params, Q):
        n = Q.shape[0]
        if params.n != n:
            raise InvalidParams("network has {} nodes but Q is {}x{}".format(params.n, n, n))
        self.n = n
        self.arrival = params.arrival_rates.tolist()
        self.capacity = params.capacities.tolist()
        self.lam = math.fsum(self.arrival)
        self.mu = math.fsum(self.capacity)
        self.arrival_cum = np.cumsum(self.arrival).tolist()
        self.capacity_cum = np.cumsum(self.capacity).tolist()
        self.out_rate = [float(-Q[i, i]) for i in range(n)]
        self.dest_cum = []
        self.dest = []
        for i in range(n):
            js = [j for j in range(n) if j != i and Q[i, j] > 0]
            self.dest.append(js)
            self.dest_cum.append(np.cumsum([Q[i, j] for j in js]).tolist())

    @staticmethod
    def _pick(cum, u):
        k = bisect_right(cum, u)
        if k >= len(cum):
            # u at the top edge after rounding
            k = len(cum) - 1
            while k > 0 and cum[k] == cum[k - 1]:
                k -= 1
        return k

    def arrival_node(self, u):
        return self._pick(self.arrival_cum, u)

    def capacity_node(self, u):
        return self._pick(self.capacity_cum, u)

    def destination(self, i, u):
        cum = self.dest_cum[i]
        return self.dest[i][self._pick(cum, u * cum[-1])]


class _EventLog:

    def __init__(self, marked=False):
        self.times = array("d")
        self.kinds = array("b")
        self.frm = array("i")
        self.to = array("i")
        self.marks = array("q") if marked else None

    def add(self, t, kind, i, j, mark=None):
        self.times.append(t)
        self.kinds.append(kind)
        self.frm.append(i)
        self.to.append(j)
        if self.marks is not None:
            self.marks.append(mark)

    def __len__(self):
        return len(self.times)

    def arrays(self):
        out = [np.frombuffer(self.times, dtype=np.float64) if len(self) else np.zeros(0),
               np.frombuffer(self.kinds, dtype=np.int8) if len(self) else np.zeros(0, dtype=np.int8),
               np.asarray(self.frm, dtype=np.int64), np.asarray(self.to, dtype=np.int64)]
        out.append(np.asarray(self.marks, dtype=np.int64) if self.marks is not None else None)
        return out


def _scan(weights, u):
    """Index k with cumulative weight first exceeding u; falls back to the last positive weight."""
    acc = 0.0
    last = -1
    for k, w in enumerate(weights):
        if w > 0:
            acc += w
            last = k
            if u < acc:
                return k
    return last


def simulate(params, S, x0, horizon, rng, max_rate=math.inf, max_events=DEFAULT_MAX_EVENTS, stop=None,
             strict=False):
    """Exact sample path of the network process on [0, horizon].

    ``stop`` is an optional callable on the current state (a list); the run
    ends right after the first event for which it returns True, and the
    returned path's horizon is that event time.
    With ``strict`` an exhausted event budget raises EventBudgetExceeded
    instead of truncating the path.
    """
    if horizon <= 0:
        raise PreconditionViolated("horizon must be positive")
    tables = _Tables(params, S.Q)
    x0 = check_state(x0, tables.n)
    draws = rng.buffer()
    n = tables.n
    mu, q = tables.capacity, tables.out_rate
    lam = tables.lam
    x = x0.tolist()
    dep = math.fsum(mu[i] for i in range(n) if x[i] > 0)
    mig = math.fsum(q[i] * x[i] for i in range(n))
    log = _EventLog()
    t = 0.0
    end = float(horizon)
    truncated = stopped = False
    if stop is not None and stop(x):
        traj = replay(x0, [], [], [], [], 0.0)
        traj.stopped = True
        return traj
    while True:
        total = lam + dep + mig
        if total <= 0:
            break
        if total > max_rate:
            raise RateOverflow("total rate {:.4g} exceeds guard {:.4g} at t={:.4g}".format(total, max_rate, t))
        t_next = t + draws.exponential() / total
        if t_next > end:
            break
        if len(log) >= max_events:
            if strict:
                raise EventBudgetExceeded("event budget {} exhausted at t={:.6g}".format(max_events, t))
            logger.warning("Event budget %d exhausted at t=%.6g; path truncated", max_events, t)
            truncated, end = True, t
            break
        t = t_next
        u = draws.uniform() * total
        if u < lam:
            i = tables.arrival_node(u)
            x[i] += 1
            if x[i] == 1:
                dep += mu[i]
            mig += q[i]
            log.add(t, ARRIVAL, -1, i)
        elif u < lam + dep:
            i = _scan([mu[k] if x[k] > 0 else 0.0 for k in range(n)], u - lam)
            x[i] -= 1
            if x[i] == 0:
                dep -= mu[i]
            mig -= q[i]
            log.add(t, DEPARTURE, i, -1)
        else:
            i = _scan([q[k] * x[k] for k in range(n)], u - lam - dep)
            j = tables.destination(i, draws.uniform())
            x[i] -= 1
            x[j] += 1
            if x[i] == 0:
                dep -= mu[i]
            if x[j] == 1:
                dep += mu[j]
            mig += q[j] - q[i]
            log.add(t, MIGRATION, i, j)
        if len(log) % RESUM_EVERY == 0:
            dep = math.fsum(mu[k] for k in range(n) if x[k] > 0)
            mig = math.fsum(q[k] * x[k] for k in range(n))
        if stop is not None and stop(x):
            stopped, end = True, t
            break
    times, kinds, frm, to, _ = log.arrays()
    traj = replay(x0, times, kinds, frm, to, end, truncated=truncated)
    traj.stopped = stopped
    return traj


@dataclass(eq=False)
class LabelledPaths:
    """Particle-level output of the mu = 0 labelled construction."""
    birth_times: np.ndarray
    particle_times: list
    particle_nodes: list
    aggregate: Trajectory

    def node_at(self, k, t):
        """Position of particle k at absolute time t (-1 before its birth)."""
        if t < self.birth_times[k]:
            return -1
        times = self.particle_times[k]
        return int(self.particle_nodes[k][np.searchsorted(times, t, side="right") - 1])


def simulate_labelled(params, S, x0, horizon, rng):
    """Labelled-particle representation of the mu = 0 process.

    Particle k owns stream ``rng.spawn(k + 1)``; births use ``rng.spawn(0)``.
    Events are merged through a heap keyed on (time, stream id).
    """
    if np.any(params.capacities > 0):
        raise InvalidParams("labelled representation needs all capacities equal to 0")
    if horizon <= 0:
        raise PreconditionViolated("horizon must be positive")
    tables = _Tables(params, S.Q)
    x0 = check_state(x0, tables.n)
    q = tables.out_rate
    births = rng.spawn(0).buffer(256)
    streams = []
    birth_times, p_times, p_nodes = [], [], []
    heap = []

    def new_particle(t, node):
        k = len(streams)
        buf = rng.spawn(k + 1).buffer(64)
        streams.append(buf)
        birth_times.append(t)
        p_times.append([t])
        p_nodes.append([node])
        heapq.heappush(heap, (t + buf.exponential() / q[node], k + 1, k))

    for node, count in enumerate(x0.tolist()):
        for _ in range(count):
            new_particle(0.0, node)
    if tables.lam > 0:
        heapq.heappush(heap, (births.exponential() / tables.lam, 0, -1))

    log = _EventLog(marked=True)
    while heap:
        t, stream, k = heapq.heappop(heap)
        if t > horizon:
            break
        if k < 0:
            node = tables.arrival_node(births.uniform() * tables.lam)
            new_particle(t, node)
            log.add(t, ARRIVAL, -1, node, len(streams) - 1)
            heapq.heappush(heap, (t + births.exponential() / tables.lam, 0, -1))
            continue
        buf = streams[k]
        i = p_nodes[k][-1]
        j = tables.destination(i, buf.uniform())
        p_times[k].append(t)
        p_nodes[k].append(j)
        log.add(t, MIGRATION, i, j, k)
        heapq.heappush(heap, (t + buf.exponential() / q[j], stream, k))

    times, kinds, frm, to, marks = log.arrays()
    aggregate = replay(x0, times, kinds, frm, to, horizon, marks=marks)
    return LabelledPaths(birth_times=np.asarray(birth_times, dtype=float),
                         particle_times=[np.asarray(v) for v in p_times],
                         particle_nodes=[np.asarray(v, dtype=np.int64) for v in p_nodes],
                         aggregate=aggregate)


@dataclass(eq=False)
class TriplePath:
    """Sample path of (X, Y, Z) with the two Poisson counters, on a common epoch grid."""
    times: np.ndarray
    kinds: np.ndarray
    from_node: np.ndarray
    to_node: np.ndarray
    component: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    n_lambda: np.ndarray
    n_mu: np.ndarray
    horizon: float

    @property
    def n(self):
        return self.x.shape[1]

    @classmethod
    def from_events(cls, x0, events, horizon):
        """Rebuild a path from (time, kind, from, to, component) tuples."""
        x0 = np.asarray(x0, dtype=np.int64)
        n = x0.shape[0]
        rows = len(events) + 1
        times = np.zeros(rows)
        kinds = np.full(rows, INITIAL, dtype=np.int8)
        frm = np.full(rows, -1, dtype=np.int64)
        to = np.full(rows, -1, dtype=np.int64)
        comp = np.full(rows, -1, dtype=np.int64)
        for r, (t, kind, i, j, c) in enumerate(events, start=1):
            times[r], kinds[r], frm[r], to[r], comp[r] = t, kind, i, j, c
        dx = np.zeros((rows, n), dtype=np.int64)
        dy = np.zeros_like(dx)
        dz = np.zeros_like(dx)
        idx = np.arange(rows)

        def move(delta, mask, nodes, sign):
            np.add.at(delta, (idx[mask], nodes[mask]), sign)

        arrival, death, virtual = kinds == ARRIVAL, kinds == DEPARTURE, kinds == VIRTUAL
        migration = kinds == MIGRATION
        move(dx, arrival, to, 1)
        move(dx, death, frm, -1)
        move(dy, death, frm, 1)
        move(dz, virtual, to, 1)
        for delta, part in ((dx, X_PART), (dy, Y_PART), (dz, Z_PART)):
            mask = migration & (comp == part)
            move(delta, mask, frm, -1)
            move(delta, mask, to, 1)
        return cls(times=times, kinds=kinds, from_node=frm, to_node=to, component=comp,
                   x=x0[None, :] + np.cumsum(dx, axis=0), y=np.cumsum(dy, axis=0),
                   z=np.cumsum(dz, axis=0), n_lambda=np.cumsum(arrival),
                   n_mu=np.cumsum(death | virtual), horizon=float(horizon))

    def x_trajectory(self):
        keep = ((self.kinds == INITIAL) | (self.kinds == ARRIVAL) | (self.kinds == DEPARTURE)
                | ((self.kinds == MIGRATION) & (self.component == X_PART)))
        return Trajectory(times=self.times[keep], states=self.x[keep], kinds=self.kinds[keep],
                          from_node=self.from_node[keep], to_node=self.to_node[keep],
                          horizon=self.horizon)

    def empty_index(self):
        hits = np.flatnonzero(np.any(self.x == 0, axis=1))
        return int(hits[0]) if hits.size else None

    def violations(self):
        """Counts of epochs breaking the decomposition X = (X+Y) - (Y+Z) + Z and its side conditions."""
        xy, yz = self.x + self.y, self.y + self.z
        L0 = int(self.x[0].sum())
        z_total = self.z.sum(axis=1)
        grew = np.flatnonzero(np.diff(z_total) > 0) + 1
        # a virtual particle at node i needs X_i = 0 just before the event
        inactive = int(np.count_nonzero(self.x[grew - 1, self.to_node[grew]] != 0))
        return {
            "decomposition": int(np.count_nonzero(np.any(self.x != xy - yz + self.z, axis=1))),
            "negative": int(np.count_nonzero((self.x < 0) | (self.y < 0) | (self.z < 0))),
            "start": int(np.any(self.y[0] != 0) or np.any(self.z[0] != 0)),
            "lambda_counter": int(np.count_nonzero(xy.sum(axis=1) - L0 != self.n_lambda)),
            "mu_counter": int(np.count_nonzero(yz.sum(axis=1) != self.n_mu)),
            "z_monotone": int(np.count_nonzero(np.diff(z_total) < 0)),
            "z_activation": inactive,
        }


def simulate_triple(params, S, x0, horizon, rng, max_rate=math.inf, max_events=DEFAULT_MAX_EVENTS):
    """Sample the enlarged (X, Y, Z) process started from (x0, 0, 0)."""
    if horizon <= 0:
        raise PreconditionViolated("horizon must be positive")
    tables = _Tables(params, S.Q)
    x0 = check_state(x0, tables.n)
    draws = rng.buffer()
    n, q = tables.n, tables.out_rate
    lam, mu = tables.lam, tables.mu
    parts = [x0.tolist(), [0] * n, [0] * n]
    x, z = parts[X_PART], parts[Z_PART]
    mig = math.fsum(q[i] * x[i] for i in range(n))
    events = []
    t = 0.0
    end = float(horizon)
    while True:
        total = lam + mu + mig
        if total <= 0:
            break
        if total > max_rate:
            raise RateOverflow("total rate {:.4g} exceeds guard {:.4g}".format(total, max_rate))
        t_next = t + draws.exponential() / total
        if t_next > end:
            break
        if len(events) >= max_events:
            logger.warning("Event budget %d exhausted; triple path truncated", max_events)
            end = t
            break
        t = t_next
        u = draws.uniform() * total
        if u < lam:
            i = tables.arrival_node(u)
            x[i] += 1
            mig += q[i]
            events.append((t, ARRIVAL, -1, i, -1))
        elif u < lam + mu:
            i = tables.capacity_node(u - lam)
            if x[i] >= 1:
                x[i] -= 1
                parts[Y_PART][i] += 1
                events.append((t, DEPARTURE, i, -1, -1))
            else:
                z[i] += 1
                mig += q[i]
                events.append((t, VIRTUAL, -1, i, -1))
        else:
            weights = [q[i] * parts[c][i] for c in (X_PART, Y_PART, Z_PART) for i in range(n)]
            k = _scan(weights, u - lam - mu)
            c, i = divmod(k, n)
            j = tables.destination(i, draws.uniform())
            parts[c][i] -= 1
            parts[c][j] += 1
            mig += q[j] - q[i]
            events.append((t, MIGRATION, i, j, c))
        if len(events) % RESUM_EVERY == 0:
            mig = math.fsum(q[i] * (parts[0][i] + parts[1][i] + parts[2][i]) for i in range(n))
    return TriplePath.from_events(x0, events, end)


@dataclass(frozen=True)
class EmbeddingReport:
    passed: bool
    equality_violations: int
    inequality_violations: int
    first_violation: float
    empty_time: float

    def as_dict(self):
        return dict(self.__dict__)


def check_mm1_embedding(tp):
    """L = L(0) + N_lambda - N_mu up to T_0, and L >= L(0) + N_lambda - N_mu throughout."""
    L = tp.x.sum(axis=1)
    walk = L[0] + tp.n_lambda - tp.n_mu
    k0 = tp.empty_index()
    upto = tp.times.shape[0] if k0 is None else k0 + 1
    eq_bad = np.flatnonzero(L[:upto] != walk[:upto])
    ineq_bad = np.flatnonzero(L < walk)
    firsts = [tp.times[b[0]] for b in (eq_bad, ineq_bad) if b.size]
    return EmbeddingReport(passed=not firsts, equality_violations=int(eq_bad.size),
                           inequality_violations=int(ineq_bad.size),
                           first_violation=float(min(firsts)) if firsts else math.inf,
                           empty_time=math.inf if k0 is None else float(tp.times[k0]))


@dataclass(eq=False)
class CoupledPair:
    """Two network paths driven by the same Poisson sources, on a joint epoch grid.

    ``marks`` holds the particle index k drawn for migrations (-1 otherwise).
    """
    times: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    kinds: np.ndarray
    from_node: np.ndarray
    to_node: np.ndarray
    marks: np.ndarray
    horizon: float

    def _trajectory(self, states):
        keep = np.concatenate([[True], np.any(np.diff(states, axis=0) != 0, axis=1)])
        frm = np.where(self.kinds == ARRIVAL, -1, self.from_node)
        to = np.where(self.kinds == DEPARTURE, -1, self.to_node)
        return Trajectory(times=self.times[keep], states=states[keep], kinds=self.kinds[keep],
                          from_node=frm[keep], to_node=to[keep], horizon=self.horizon,
                          marks=self.marks[keep])

    def trajectories(self):
        return self._trajectory(self.upper), self._trajectory(self.lower)

    def __iter__(self):
        return iter(self.trajectories())

    def violations(self):
        gap0 = int(self.upper[0].sum() - self.lower[0].sum())
        gap = self.upper.sum(axis=1) - self.lower.sum(axis=1)
        return {"dominance": int(np.count_nonzero(np.any(self.upper < self.lower, axis=1))),
                "gap": int(np.count_nonzero(gap > gap0))}


def simulate_coupled_pair(params, S, x, y, horizon, rng, max_population=DEFAULT_MAX_POPULATION):
    """Monotone coupling of the paths started at x >= y.

    Arrivals and the departure clock of each node are shared. A migration off
    node i picks a particle index k uniformly in 1..X^x_i; it moves a particle
    of X^y too when k <= X^y_i.
    """
    if horizon <= 0:
        raise PreconditionViolated("horizon must be positive")
    tables = _Tables(params, S.Q)
    x = check_state(x, tables.n)
    y = check_state(y, tables.n)
    if np.any(x < y):
        raise PreconditionViolated("coupled pair needs x >= y componentwise, got {} and {}".format(x.tolist(), y.tolist()))
    draws = rng.buffer()
    n, q = tables.n, tables.out_rate
    lam, mu = tables.lam, tables.mu
    a, b = x.tolist(), y.tolist()
    mig = math.fsum(q[i] * a[i] for i in range(n))
    times, kinds, frm, to, marks, hit_a, hit_b = [], [], [], [], [], [], []
    t = 0.0
    while True:
        total = lam + mu + mig
        if total <= 0:
            break
        t += draws.exponential() / total
        if t > horizon:
            break
        u = draws.uniform() * total
        if u < lam:
            i = tables.arrival_node(u)
            a[i] += 1
            b[i] += 1
            mig += q[i]
            if a[i] > max_population:
                raise RateOverflow("population {} exceeds the stream pool cap {}".format(a[i], max_population))
            row = (ARRIVAL, i, i, -1, True, True)
        elif u < lam + mu:
            i = tables.capacity_node(u - lam)
            on_a, on_b = a[i] >= 1, b[i] >= 1
            if not on_a:
                continue
            a[i] -= 1
            mig -= q[i]
            if on_b:
                b[i] -= 1
            row = (DEPARTURE, i, i, -1, True, on_b)
        else:
            i = _scan([q[k] * a[k] for k in range(n)], u - lam - mu)
            j = tables.destination(i, draws.uniform())
            k = min(int(draws.uniform() * a[i]), a[i] - 1) + 1
            on_b = k <= b[i]
            a[i] -= 1
            a[j] += 1
            if on_b:
                b[i] -= 1
                b[j] += 1
            mig += q[j] - q[i]
            row = (MIGRATION, i, j, k, True, on_b)
        kind, i, j, mark, on_a, on_b = row
        times.append(t)
        kinds.append(kind)
        frm.append(i)
        to.append(j)
        marks.append(mark)
        hit_a.append(on_a)
        hit_b.append(on_b)

    rows = len(times) + 1
    kinds = np.concatenate([[INITIAL], kinds]).astype(np.int8)
    frm = np.concatenate([[-1], frm]).astype(np.int64)
    to = np.concatenate([[-1], to]).astype(np.int64)

    def states(start, hit):
        hit = np.concatenate([[False], hit]).astype(bool)
        delta = np.zeros((rows, n), dtype=np.int64)
        idx = np.arange(rows)
        arrive = hit & (kinds == ARRIVAL)
        leave = hit & (kinds == DEPARTURE)
        move = hit & (kinds == MIGRATION)
        np.add.at(delta, (idx[arrive], to[arrive]), 1)
        np.add.at(delta, (idx[leave], frm[leave]), -1)
        np.add.at(delta, (idx[move], frm[move]), -1)
        np.add.at(delta, (idx[move], to[move]), 1)
        return start[None, :] + np.cumsum(delta, axis=0)

    return CoupledPair(times=np.concatenate([[0.0], times]), upper=states(x, hit_a),
                       lower=states(y, hit_b), kinds=kinds, from_node=frm, to_node=to,
                       marks=np.concatenate([[-1], marks]).astype(np.int64), horizon=float(horizon))


@dataclass(eq=False)
class ClosedCoupling:
    """Open process X and the closed process U built from the same initial particles."""
    times: np.ndarray
    x: np.ndarray
    u: np.ndarray
    n_lambda: np.ndarray
    n_mu: np.ndarray
    horizon: float
    tracked: np.ndarray = None

    def x_trajectory(self):
        return _changes_only(self.times, self.x, self.horizon)

    def u_trajectory(self):
        return _changes_only(self.times, self.u, self.horizon)

    def __iter__(self):
        return iter((self.x_trajectory(), self.u_trajectory(), self.n_lambda, self.n_mu))

    def violations(self):
        lower = self.u - self.n_mu[:, None]
        upper = self.u + self.n_lambda[:, None]
        L, L0 = self.x.sum(axis=1), int(self.x[0].sum())
        return {
            "sandwich_lower": int(np.count_nonzero(np.any(self.x < lower, axis=1))),
            "sandwich_upper": int(np.count_nonzero(np.any(self.x > upper, axis=1))),
            "total_lower": int(np.count_nonzero(L < L0 - self.n_mu)),
            "total_upper": int(np.count_nonzero(L > L0 + self.n_lambda)),
            "closed_population": int(np.count_nonzero(self.u.sum(axis=1) != int(self.u[0].sum()))),
            "tracked_overflow": 0 if self.tracked is None else int(np.count_nonzero(self.tracked > L + L0)),
        }


def _changes_only(times, states, horizon):
    """Trajectory keeping the epochs where ``states`` moves; events inferred from the deltas."""
    keep = np.concatenate([[True], np.any(np.diff(states, axis=0) != 0, axis=1)])
    t, s = times[keep], states[keep]
    delta = np.diff(s, axis=0)
    frm = np.concatenate([[-1], np.where((delta < 0).any(axis=1), np.argmin(delta, axis=1), -1)])
    to = np.concatenate([[-1], np.where((delta > 0).any(axis=1), np.argmax(delta, axis=1), -1)])
    kinds = np.full(t.shape[0], MIGRATION, dtype=np.int8)
    kinds[0] = INITIAL
    kinds[(frm < 0) & (to >= 0)] = ARRIVAL
    kinds[(frm >= 0) & (to < 0)] = DEPARTURE
    return Trajectory(times=t, states=s, kinds=kinds, from_node=frm, to_node=to, horizon=float(horizon))


class _NodeBag:
    """Particle ids per node with O(1) insert, removal and uniform choice."""

    def __init__(self, n):
        self.members = [[] for _ in range(n)]
        self.where = {}

    def add(self, k, i):
        self.where[k] = (i, len(self.members[i]))
        self.members[i].append(k)

    def remove(self, k):
        i, pos = self.where.pop(k)
        bucket = self.members[i]
        last = bucket.pop()
        if last != k:
            bucket[pos] = last
            self.where[last] = (i, pos)

    def choose(self, i, u):
        bucket = self.members[i]
        return bucket[min(int(u * len(bucket)), len(bucket) - 1)]

    def count(self, i):
        return len(self.members[i])


def simulate_closed_coupling(params, S, x0, horizon, rng, max_population=DEFAULT_MAX_POPULATION):
    """Open process X coupled with the closed process U of its initial particles.

    Initial particles keep moving with generator Q after they are killed, so
    U stays closed; a killed arrival leaves the system. A departure at node i
    kills a uniformly chosen living particle there, or only bumps N_mu when
    node i is empty. ``tracked`` is the number of moving particles after each
    event, at most the live population plus the initial count.
    """
    if horizon <= 0:
        raise PreconditionViolated("horizon must be positive")
    tables = _Tables(params, S.Q)
    x0 = check_state(x0, tables.n)
    draws = rng.buffer()
    n, q = tables.n, tables.out_rate
    lam, mu = tables.lam, tables.mu
    everyone, alive = _NodeBag(n), _NodeBag(n)
    initial_count = int(x0.sum())
    k = 0
    for i, count in enumerate(x0.tolist()):
        for _ in range(count):
            everyone.add(k, i)
            alive.add(k, i)
            k += 1
    next_id = k
    mig = math.fsum(q[i] * everyone.count(i) for i in range(n))
    # per event: time, dx (from, to), du (from, to), dlambda, dmu, tracked
    rows = []
    t = 0.0
    while True:
        total = lam + mu + mig
        if total <= 0:
            break
        t += draws.exponential() / total
        if t > horizon:
            break
        u = draws.uniform() * total
        if u < lam:
            i = tables.arrival_node(u)
            everyone.add(next_id, i)
            alive.add(next_id, i)
            next_id += 1
            mig += q[i]
            if len(everyone.where) > max_population:
                raise RateOverflow("particle pool cap {} exceeded".format(max_population))
            rows.append((t, -1, i, -1, -1, 1, 0, len(everyone.where)))
        elif u < lam + mu:
            i = tables.capacity_node(u - lam)
            if alive.count(i):
                p = alive.choose(i, draws.uniform())
                alive.remove(p)
                if p >= initial_count:
                    everyone.remove(p)
                    mig = math.fsum(q[m] * everyone.count(m) for m in range(n))
                rows.append((t, i, -1, -1, -1, 0, 1, len(everyone.where)))
            else:
                rows.append((t, -1, -1, -1, -1, 0, 1, len(everyone.where)))
        else:
            i = _scan([q[m] * everyone.count(m) for m in range(n)], u - lam - mu)
            p = everyone.choose(i, draws.uniform())
            j = tables.destination(i, draws.uniform())
            everyone.remove(p)
            everyone.add(p, j)
            is_alive = p in alive.where
            if is_alive:
                alive.remove(p)
                alive.add(p, j)
            mig += q[j] - q[i]
            moves_x = (i, j) if is_alive else (-1, -1)
            moves_u = (i, j) if p < initial_count else (-1, -1)
            rows.append((t,) + moves_x + moves_u + (0, 0, len(everyone.where)))

    K = len(rows) + 1
    log = np.array(rows, dtype=float).reshape(-1, 8)
    times = np.concatenate([[0.0], log[:, 0]])
    idx = np.arange(1, K)

    def build(start, frm, to):
        delta = np.zeros((K, n), dtype=np.int64)
        frm = frm.astype(np.int64)
        to = to.astype(np.int64)
        np.add.at(delta, (idx[frm >= 0], frm[frm >= 0]), -1)
        np.add.at(delta, (idx[to >= 0], to[to >= 0]), 1)
        return start[None, :] + np.cumsum(delta, axis=0)

    x = build(x0, log[:, 1], log[:, 2])
    u0 = x0.copy()
    U = build(u0, log[:, 3], log[:, 4])
    n_lambda = np.concatenate([[0], np.cumsum(log[:, 5])]).astype(np.int64)
    n_mu = np.concatenate([[0], np.cumsum(log[:, 6])]).astype(np.int64)
    tracked = np.concatenate([[initial_count], log[:, 7]]).astype(np.int64)
    return ClosedCoupling(times=times, x=x, u=U, n_lambda=n_lambda, n_mu=n_mu, horizon=float(horizon),
                          tracked=tracked)


def simulate_birth_death(lam, mu, L0, horizon, rng):
    """M/M/1 queue length on [0, horizon]: returns (jump times, values) with row 0 at t=0."""
    draws = rng.buffer()
    times, values = [0.0], [int(L0)]
    t, L = 0.0, int(L0)
    while True:
        total = lam + (mu if L > 0 else 0.0)
        if total <= 0:
            break
        t += draws.exponential() / total
        if t > horizon:
            break
        L += 1 if draws.uniform() * total < lam else -1
        times.append(t)
        values.append(L)
    return np.asarray(times), np.asarray(values, dtype=np.int64)


def value_at(times, values, t):
    return values[np.searchsorted(times, t, side="right") - 1]


@dataclass
class CouplingReport:
    paths: int
    violations: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(v == 0 for v in self.violations.values())

    def add(self, counts, prefix):
        for key, value in counts.items():
            name = "{}.{}".format(prefix, key)
            self.violations[name] = self.violations.get(name, 0) + int(value)

    def as_dict(self):
        return {"paths": self.paths, "passed": self.passed, "violations": dict(self.violations)}


def pathwise_checks(params, S, rng, paths=1000, horizon=2.0, max_initial=8):
    """Scan all coupling constructions on ``paths`` random starts; every count must stay 0."""
    report = CouplingReport(paths=paths)
    picker = rng.spawn(0).generator()
    logger.info("***** Running pathwise coupling checks *****")
    logger.info("  Num paths = %d", paths)
    logger.info("  Horizon = %g", horizon)
    for p in tqdm(range(paths), desc="coupling paths"):
        x0 = picker.integers(0, max_initial + 1, size=S.n)
        y0 = np.array([picker.integers(0, v + 1) for v in x0])
        stream = rng.spawn(p + 1)
        tp = simulate_triple(params, S, x0, horizon, stream.spawn(0))
        report.add(tp.violations(), "triple")
        embedding = check_mm1_embedding(tp)
        report.add({"equality": embedding.equality_violations,
                    "inequality": embedding.inequality_violations}, "mm1")
        report.add(simulate_closed_coupling(params, S, x0, horizon, stream.spawn(1)).violations(), "closed")
        report.add(simulate_coupled_pair(params, S, x0, y0, horizon, stream.spawn(2)).violations(), "pair")
        report.add({"events": tp.x_trajectory().event_violations()}, "path")
    if not report.passed:
        logger.warning("Coupling violations: %s", {k: v for k, v in report.violations.items() if v})
    return report
