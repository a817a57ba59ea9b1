"""Ensemble experiments along an N-ladder.

Each experiment fans replicas out to ``run_replicas``; replica r at scale N
draws from the stream (seed, N, r), so the same seeds drive every start of a
given (N, r) and reruns are bit-for-bit identical.
"""
import math
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.stats import binomtest

from .errors import InvalidParams, PreconditionViolated, RegimeMismatch
from .martingale import EntropyExit
from .simulator import DEFAULT_MAX_EVENTS, simulate
from .spectral import evolve_distribution, semigroup_grid
from .state import (SUPERCRITICAL, SUBCRITICAL, check_simplex_point, chi_rows, entropy, epsilon_zero,
                    first_time, sup_norm)
from .utils import RngStream, largest_remainder, raise_immediately, run_replicas

logger = logging.getLogger(__name__)

PROPORTIONAL = "proportional"
CORNER = "corner"
CUSTOM = "custom"
INITIAL_RECIPES = (PROPORTIONAL, CORNER, CUSTOM)

ALPHA_LEVEL = 0.05
TWO_PASS_TOL = 1e-12
TRACE_POINTS = 51
KELLY_GRID = 400
SCHEDULE_CONSTANT = 4.0


@dataclass(frozen=True)
class ScalingPlan:
    """Population ladder, replica count and initial-state recipe of an experiment.

    ``horizon`` is in fluid time for the N-rescaled experiments and in real
    time for the Kelly scaling. ``delta_exponent`` selects the schedule
    delta_N = delta_scale * N^-delta_exponent.
    """
    n_ladder: tuple
    replicas: int = 50
    horizon: float = 2.0
    window_start: float = 0.1
    initial: str = PROPORTIONAL
    rho: tuple = None
    custom_state: tuple = None
    a: float = 1.0
    delta: float = None
    delta_exponent: float = None
    delta_scale: float = 1.0
    max_events: int = DEFAULT_MAX_EVENTS

    def __post_init__(self):
        ladder = tuple(sorted(int(N) for N in self.n_ladder))
        if not ladder or ladder[0] < 1:
            raise InvalidParams("n_ladder needs positive population scales")
        object.__setattr__(self, "n_ladder", ladder)
        for name in ("rho", "custom_state"):
            if getattr(self, name) is not None:
                object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if int(self.replicas) < 2:
            raise InvalidParams("replicas needs to be at least 2")
        if self.initial not in INITIAL_RECIPES:
            raise InvalidParams("initial needs to be one of {}".format(", ".join(INITIAL_RECIPES)))
        if self.initial == CUSTOM and self.custom_state is None:
            raise InvalidParams("initial = custom needs custom_state")
        if self.a <= 0 or self.horizon <= 0:
            raise InvalidParams("a and horizon must be positive")
        if self.delta is not None and self.delta <= 0:
            raise InvalidParams("delta must be positive")
        if self.delta_exponent is not None and not 0 < self.delta_exponent < 0.5:
            raise InvalidParams("delta_N = c N^-e needs 0 < e < 1/2 so that delta_N -> 0 and delta_N sqrt(N) -> inf")
        if self.delta_scale <= 0:
            raise InvalidParams("delta_scale must be positive")

    def size(self, N):
        return int(math.floor(self.a * N))

    def delta_N(self, N):
        if self.delta_exponent is None:
            return None
        return self.delta_scale * N ** (-self.delta_exponent)

    def starts(self, N, pi, recipe=None):
        """Labelled initial states of total ``size(N)`` for one rung of the ladder."""
        recipe = recipe or self.initial
        size = self.size(N)
        n = len(pi)
        if recipe == CORNER:
            return [("corner-{}".format(k + 1), size * np.eye(n, dtype=np.int64)[k]) for k in range(n)]
        if recipe == CUSTOM:
            return [(CUSTOM, largest_remainder(np.asarray(self.custom_state), size))]
        weights = pi if self.rho is None else np.asarray(self.rho)
        return [(PROPORTIONAL, largest_remainder(weights, size))]


def mixing_time(S, delta, constant=SCHEDULE_CONSTANT):
    """-(1/eta) log(delta / (constant B)), clipped at 0."""
    return max(0.0, -math.log(delta / (constant * S.B)) / S.eta)


def extinction_time(params, a):
    gap = params.mu - params.lam
    return a / gap if gap > 0 else math.inf


def fluid_path(params, S, a, u):
    """(a + (lambda - mu) u)^+ pi for every fluid time in ``u``."""
    mass = np.maximum(a + (params.lam - params.mu) * np.asarray(u, dtype=float), 0.0)
    return mass[..., None] * S.pi


def schedule_table(plan, S):
    rows = []
    for N in plan.n_ladder:
        d = plan.delta_N(N)
        if d is None:
            continue
        rows.append({"N": N, "delta_N": d, "s_N": mixing_time(S, d, 2.0), "t_N": mixing_time(S, d),
                     "delta_N_sqrt_N": d * math.sqrt(N), "chebyshev_bound": S.n / (d * d * N)})
    return rows


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def sign_trend(small, large, alternative="less"):
    """One-sided sign test of the large-N sample against the small-N median."""
    small, large = np.asarray(small, dtype=float), np.asarray(large, dtype=float)
    median = float(np.median(small))
    k = int(np.sum(large < median)) if alternative == "less" else int(np.sum(large > median))
    p = float(binomtest(k, large.size, 0.5, alternative="greater").pvalue)
    return {"test": "sign", "median_small": median, "median_large": float(np.median(large)),
            "k": k, "n": int(large.size), "p_value": p, "passed": bool(p < ALPHA_LEVEL)}


def rate_trend(k_small, n_small, k_large, n_large, alternative="less"):
    """One-sided binomial test of the large-N rate against the small-N rate."""
    p0 = k_small / n_small
    out = {"test": "binomial", "rate_small": p0, "rate_large": k_large / n_large,
           "k": int(k_large), "n": int(n_large)}
    if (alternative == "less" and p0 == 0.0) or (alternative == "greater" and p0 == 1.0):
        out.update(p_value=None, passed=bool(k_large == (0 if alternative == "less" else n_large)))
        return out
    p = float(binomtest(int(k_large), int(n_large), p0, alternative=alternative).pvalue)
    out.update(p_value=p, passed=bool(p < ALPHA_LEVEL))
    return out


def clopper_pearson_upper(k, n, level=0.95):
    return float(binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="exact").high)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EnsembleReport:
    """Per-replica rows plus named verdicts; hard verdicts decide the exit status."""
    experiment: str
    frame: pd.DataFrame
    verdicts: list = field(default_factory=list)
    info: dict = field(default_factory=dict)
    trace: pd.DataFrame = None

    def add_verdict(self, check, passed, hard=False, **detail):
        passed = None if passed is None else bool(passed)
        self.verdicts.append({"check": check, "passed": passed, "hard": hard, **detail})
        if passed is False:
            log = logger.error if hard else logger.warning
            log("%s: check '%s' failed %s", self.experiment, check, detail)

    @property
    def hard_failed(self):
        return any(v["hard"] and v["passed"] is False for v in self.verdicts)

    @property
    def passed(self):
        return all(v["passed"] is not False for v in self.verdicts)

    def stats(self):
        return []

    def summary(self):
        return {"experiment": self.experiment, "info": self.info, "stats": self.stats(),
                "verdicts": self.verdicts, "passed": self.passed, "hard_failed": self.hard_failed}


@dataclass
class DeviationReport(EnsembleReport):
    tolerance: float = 0.1
    pass_fraction: float = 0.95

    def quantiles(self, column="deviation"):
        q = self.frame.groupby("N")[column].quantile([0.05, 0.25, 0.5, 0.75, 0.95]).unstack()
        q.columns = ["q05", "q25", "q50", "q75", "q95"]
        return q

    def pass_rates(self, column="deviation"):
        return self.frame.groupby("N")[column].apply(lambda d: float((d <= self.tolerance).mean()))

    def stats(self):
        q = self.quantiles()
        q["pass_rate"] = self.pass_rates()
        q["censored"] = self.frame.groupby("N")["censored"].sum()
        q["replicas"] = self.frame.groupby("N").size()
        return q.reset_index().to_dict(orient="records")


def _two_pass_verdict(report, frame):
    gap = float((frame["deviation"] - frame["deviation_rescan"]).abs().max())
    report.add_verdict("two_pass", gap <= TWO_PASS_TOL, hard=True, max_gap=gap)


def _tasks(plan, seed, starts_for, **shared):
    tasks = []
    for N in plan.n_ladder:
        for label, x0 in starts_for(N):
            for r in range(plan.replicas):
                tasks.append(dict(shared, N=N, start=label, x0=x0, replica=r, seed=seed, stream=(N, r),
                                  max_events=plan.max_events))
    return tasks


def _log_run(name, plan, **extra):
    logger.info("***** Running %s *****", name)
    logger.info("  N ladder = %s", list(plan.n_ladder))
    logger.info("  Replicas per N = %d", plan.replicas)
    for key, value in extra.items():
        logger.info("  %s = %s", key, value)


# ---------------------------------------------------------------------------
# Kelly scaling: X(t)/N against rho P_t
# ---------------------------------------------------------------------------

@raise_immediately
def _kelly_replica(task):
    S, N, T, rho = task["S"], task["N"], task["T"], task["rho"]
    traj = simulate(task["params"], S, task["x0"], T, RngStream(task["seed"], task["stream"]),
                    max_events=task["max_events"])
    grid = np.linspace(0.0, T, KELLY_GRID + 1)
    grid = grid[grid <= traj.horizon]
    # epochs, their left limits and a time grid
    pts_t = np.concatenate([traj.times, traj.times[1:], grid])
    pts_x = np.vstack([traj.states, traj.states[:-1], traj.states_at(grid)])
    curve = evolve_distribution(S, rho, pts_t)
    deviation = float(sup_norm(pts_x / N - curve).max())
    chi_deviation = float(sup_norm(chi_rows(pts_x) - curve).max())
    # rescan piece by piece with P_t built independently
    breaks = np.union1d(traj.times, grid)
    curve2 = np.einsum("j,kjl->kl", rho, semigroup_grid(S, breaks))
    held = traj.states[traj.index_at(breaks)] / N
    rescan = max(float(sup_norm(held - curve2).max()),
                 float(sup_norm(held[:-1] - curve2[1:]).max()) if breaks.size > 1 else 0.0)
    trace_t = grid[::max(1, KELLY_GRID // (TRACE_POINTS - 1))]
    trace_dev = sup_norm(traj.states_at(trace_t) / N - evolve_distribution(S, rho, trace_t))
    row = {"N": N, "replica": task["replica"], "start": task["start"], "deviation": deviation,
           "deviation_rescan": rescan, "chi_deviation": chi_deviation, "events": traj.num_events,
           "censored": bool(traj.truncated)}
    trace = [{"fluid_time": float(t), "deviation": float(d), "N": N, "replica": task["replica"]}
             for t, d in zip(trace_t, trace_dev)]
    return row, trace


def kelly_run(plan, S, params, rho=None, T=None, seed=0, workers=1, tolerance=0.1, pass_fraction=0.95):
    """sup_{t <= T} |X(t)/N - rho P_t| per replica, starting from x_N ~ N rho."""
    if rho is None:
        rho = S.pi if plan.rho is None else plan.rho
    rho = check_simplex_point(rho)
    T = plan.horizon if T is None else float(T)
    _log_run("Kelly scaling", plan, T=T, rho=rho.tolist())
    tasks = _tasks(plan, seed, lambda N: [(PROPORTIONAL, largest_remainder(rho, N))],
                   params=params, S=S, T=T, rho=rho)
    results = run_replicas(_kelly_replica, tasks, workers, desc="kelly")
    frame = pd.DataFrame([r[0] for r in results])
    trace = pd.DataFrame([row for r in results for row in r[1]])
    report = DeviationReport(experiment="kelly", frame=frame, trace=trace, tolerance=tolerance,
                             pass_fraction=pass_fraction, info={"T": T, "rho": rho.tolist()})
    _two_pass_verdict(report, frame)
    _deviation_trend(report, plan)
    return report


def _deviation_trend(report, plan):
    frame = report.frame
    small, large = plan.n_ladder[0], plan.n_ladder[-1]
    if small == large:
        return
    trend = sign_trend(frame.loc[frame.N == small, "deviation"], frame.loc[frame.N == large, "deviation"])
    report.add_verdict("median_decreasing", **trend)


# ---------------------------------------------------------------------------
# fluid scaling: X(N u)/N against (a + (lambda - mu) u)^+ pi on [s, t]
# ---------------------------------------------------------------------------

@raise_immediately
def _fluid_replica(task):
    S, params, N, a = task["S"], task["params"], task["N"], task["a"]
    s, t_end = task["window"]
    traj = simulate(params, S, task["x0"], N * t_end, RngStream(task["seed"], task["stream"]),
                    max_events=task["max_events"])
    hi = min(t_end, traj.horizon / N)
    t_a = extinction_time(params, a)
    extra = np.array([s, hi] + ([t_a] if s < t_a < hi else []))
    extra_real = np.minimum(extra * N, traj.horizon)
    # pass 1: epochs in the window with their left limits
    u = traj.times / N
    k = np.flatnonzero((u >= s) & (u <= hi))
    k = k[k > 0]
    pts_u = np.concatenate([u[k], u[k], extra])
    pts_x = np.vstack([traj.states[k], traj.states[k - 1], traj.states_at(extra_real)])
    deviation = float(sup_norm(pts_x / N - fluid_path(params, S, a, pts_u)).max())
    # pass 2: constant pieces between breakpoints in real time
    inside = traj.times[(traj.times > s * N) & (traj.times < hi * N)]
    breaks = np.unique(np.concatenate([inside, extra_real]))
    held = traj.states[traj.index_at(breaks)] / N
    target = fluid_path(params, S, a, breaks / N)
    rescan = float(sup_norm(held - target).max())
    if breaks.size > 1:
        rescan = max(rescan, float(sup_norm(held[:-1] - target[1:]).max()))
    trace_u = np.linspace(s, hi, TRACE_POINTS)
    trace_x = traj.states_at(np.minimum(trace_u * N, traj.horizon)) / N
    trace_dev = sup_norm(trace_x - fluid_path(params, S, a, trace_u))
    row = {"N": N, "replica": task["replica"], "start": task["start"], "deviation": deviation,
           "deviation_rescan": rescan, "final_mass": float(traj.final.sum()) / N,
           "events": traj.num_events, "censored": bool(traj.truncated)}
    trace = [{"fluid_time": float(v), "deviation": float(d), "N": N, "replica": task["replica"]}
             for v, d in zip(trace_u, trace_dev)]
    return row, trace


def fluid_run(plan, S, params, regime, seed=0, workers=1, tolerance=0.1, pass_fraction=0.95):
    """Sup-norm deviation of the fluid-scaled path from its regime's limit over [s, t]."""
    if regime != params.regime:
        raise RegimeMismatch("declared regime '{}' but lambda={:.6g}, mu={:.6g} is {}"
                             .format(regime, params.lam, params.mu, params.regime))
    s, t_end = plan.window_start, plan.horizon
    if not 0 < s < t_end:
        raise PreconditionViolated("fluid window needs 0 < s < t, got [{}, {}]".format(s, t_end))
    t_a = extinction_time(params, plan.a)
    _log_run("fluid limit", plan, regime=regime, window=(s, t_end), a=plan.a)
    tasks = _tasks(plan, seed, lambda N: plan.starts(N, S.pi), params=params, S=S, a=plan.a, window=(s, t_end))
    results = run_replicas(_fluid_replica, tasks, workers, desc="fluid")
    frame = pd.DataFrame([r[0] for r in results])
    trace = pd.DataFrame([row for r in results for row in r[1]])
    report = DeviationReport(experiment="fluid", frame=frame, trace=trace, tolerance=tolerance,
                             pass_fraction=pass_fraction,
                             info={"regime": regime, "window": [s, t_end], "a": plan.a,
                                   "t_a": None if math.isinf(t_a) else t_a})
    _two_pass_verdict(report, frame)
    largest = frame[frame.N == plan.n_ladder[-1]]
    rate = float((largest["deviation"] <= tolerance).mean())
    report.add_verdict("tolerance", rate >= pass_fraction, N=plan.n_ladder[-1], pass_rate=rate,
                       tolerance=tolerance)
    _deviation_trend(report, plan)
    censored = int(frame["censored"].sum())
    if censored:
        logger.warning("%d fluid replicas hit the event budget", censored)
    return report


# ---------------------------------------------------------------------------
# almost-sure drift X(t)/t -> (lambda - mu) pi
# ---------------------------------------------------------------------------

@raise_immediately
def _drift_replica(task):
    S, params = task["S"], task["params"]
    checkpoints = task["checkpoints"]
    traj = simulate(params, S, task["x0"], checkpoints[-1], RngStream(task["seed"], task["stream"]),
                    max_events=task["max_events"])
    reached = checkpoints[checkpoints <= traj.horizon]
    states = traj.states_at(reached)
    limit = (params.lam - params.mu) * S.pi
    rows = []
    for t, x in zip(reached, states):
        ratio = x / t
        rows.append({"path": task["replica"], "t": float(t), "deviation": float(sup_norm(ratio - limit)),
                     "drift": float(x.sum()) / t, "drift_target": params.lam - params.mu,
                     **{"x{}_over_t".format(i + 1): float(v) for i, v in enumerate(ratio)}})
    return rows


def drift_run(S, params, x0, t_max, paths=100, seed=0, workers=1, checkpoints=12, tolerance=0.05,
              pass_fraction=0.95, max_events=DEFAULT_MAX_EVENTS):
    """X(t)/t at geometrically spaced times on ``paths`` independent paths."""
    if params.regime != SUPERCRITICAL:
        raise RegimeMismatch("drift needs lambda > mu (lambda={:.6g}, mu={:.6g})".format(params.lam, params.mu))
    cps = np.geomspace(min(1.0, t_max), t_max, checkpoints)
    logger.info("***** Running drift *****")
    logger.info("  Num paths = %d", paths)
    logger.info("  t_max = %g", t_max)
    tasks = [dict(params=params, S=S, x0=np.asarray(x0), checkpoints=cps, replica=p, seed=seed, stream=(0, p),
                  max_events=max_events)
             for p in range(paths)]
    frame = pd.DataFrame([row for rows in run_replicas(_drift_replica, tasks, workers, desc="drift")
                          for row in rows])
    final = frame[frame.t == frame.t.max()]
    rate = float((final["deviation"] < tolerance).mean())
    report = EnsembleReport(experiment="drift", frame=frame,
                            info={"t_max": t_max, "limit": ((params.lam - params.mu) * S.pi).tolist(),
                                  "pass_rate": rate, "paths_reaching_t_max": int(final.shape[0])})
    report.add_verdict("drift_tolerance", rate >= pass_fraction and final.shape[0] == paths,
                       pass_rate=rate, tolerance=tolerance)
    return report


# ---------------------------------------------------------------------------
# entropy trapping and subcritical exits
# ---------------------------------------------------------------------------

def _near_entropy_start(pi, delta, size):
    """State of total ``size`` on the segment from pi toward e_1 with entropy just below delta."""
    if size <= 0:
        raise PreconditionViolated("an entropy-ball start needs a positive population, got {}".format(size))
    corner = np.zeros(len(pi))
    corner[0] = 1.0
    target = 0.9 * delta
    s = brentq(lambda s: entropy(pi + s * (corner - pi), pi) - target, 0.0, 1.0 - 1e-12)
    x = largest_remainder(pi + s * (corner - pi), size)
    # rounding may overshoot; walk back toward pi one particle at a time
    while x[0] > 0 and entropy(x / size, pi) > delta:
        k = int(np.argmin(x / size - pi))
        if k == 0:
            break
        x[0] -= 1
        x[k] += 1
    return x


@raise_immediately
def _exit_replica(task):
    S, N = task["S"], task["N"]
    x0 = task["x0"]
    horizon = task["fluid_horizon"] * N
    stop = EntropyExit(S.pi, task["eps"])
    if horizon <= 0:
        exited, exit_time, censored = bool(stop(x0.tolist())), 0.0, False
    else:
        traj = simulate(task["params"], S, x0, horizon, RngStream(task["seed"], task["stream"]), stop=stop,
                        max_events=task["max_events"])
        exited, censored = bool(traj.stopped), bool(traj.truncated)
        exit_time = traj.horizon / N if traj.stopped else math.nan
    return {"N": N, "replica": task["replica"], "start": task["start"], "exited": exited,
            "survived": not exited and not censored, "exit_fluid_time": exit_time, "censored": censored}


def _counts(frame, N, column, start=None):
    sub = frame[frame.N == N]
    if start is not None:
        sub = sub[sub.start == start]
    return int(sub[column].sum()), int(sub.shape[0])


def trapping_run(plan, S, params, eps, delta, seed=0, workers=1, contrast=False):
    """P(H(chi) stays <= eps up to the fluid horizon) per N from starts with entropy <= delta."""
    expected = SUBCRITICAL if contrast else SUPERCRITICAL
    if params.regime != expected:
        raise RegimeMismatch("trapping{} needs a {} network, got {}"
                             .format(" contrast" if contrast else "", expected, params.regime))
    _, eps0 = epsilon_zero(S.pi)
    if not 0 < delta < eps < eps0:
        raise PreconditionViolated("need 0 < delta < eps < eps0 = {:.6g}".format(eps0))

    def starts(N):
        size = plan.size(N)
        out = [("pi", largest_remainder(S.pi, size)), ("delta", _near_entropy_start(S.pi, delta, size))]
        for label, x in out:
            if entropy(x / size, S.pi) > delta:
                raise PreconditionViolated("N={} too small: start '{}' has entropy above delta".format(N, label))
        return out

    _log_run("entropy trapping", plan, eps=eps, delta=delta, fluid_horizon=plan.horizon, contrast=contrast)
    tasks = _tasks(plan, seed, starts, params=params, S=S, eps=eps, fluid_horizon=plan.horizon)
    frame = pd.DataFrame(run_replicas(_exit_replica, tasks, workers, desc="trapping"))
    report = EnsembleReport(experiment="trapping", frame=frame,
                            info={"eps": eps, "delta": delta, "fluid_horizon": plan.horizon, "contrast": contrast,
                                  "survival": _rates(frame, "survived")})
    small, large = plan.n_ladder[0], plan.n_ladder[-1]
    if not contrast and small != large:
        trend = rate_trend(*_counts(frame, small, "survived", "pi"), *_counts(frame, large, "survived", "pi"),
                           alternative="greater")
        report.add_verdict("survival_increasing", **trend)
    for N in plan.n_ladder:
        k_pi, n_pi = _counts(frame, N, "survived", "pi")
        k_d, n_d = _counts(frame, N, "survived", "delta")
        report.add_verdict("pi_start_dominates", k_pi / n_pi >= k_d / n_d, N=N,
                           survival_pi=k_pi / n_pi, survival_delta=k_d / n_d)
    censored = int(frame["censored"].sum())
    if censored:
        logger.warning("%d trapping replicas hit the event budget before the horizon", censored)
    return report


def _rates(frame, column):
    grouped = frame.groupby(["N", "start"])[column].mean().reset_index()
    return grouped.to_dict(orient="records")


def subcritical_exit_run(plan, S, params, eps, t, seed=0, workers=1):
    """P(T_H^eps <= N t) per N for starts near N a pi, with t before the extinction time."""
    if params.regime != SUBCRITICAL:
        raise RegimeMismatch("subcritical exit needs lambda < mu, got {}".format(params.regime))
    t_a = extinction_time(params, plan.a)
    if not 0 <= t < t_a:
        raise PreconditionViolated("t must lie in [0, t_a = {:.6g})".format(t_a))
    _log_run("subcritical exit", plan, eps=eps, t=t, t_a=t_a)
    tasks = _tasks(plan, seed, lambda N: plan.starts(N, S.pi, PROPORTIONAL), params=params, S=S, eps=eps,
                   fluid_horizon=t)
    frame = pd.DataFrame(run_replicas(_exit_replica, tasks, workers, desc="subcritical exit"))
    report = EnsembleReport(experiment="subcritical-exit", frame=frame,
                            info={"eps": eps, "t": t, "t_a": t_a, "exceedance": _rates(frame, "exited")})
    small, large = plan.n_ladder[0], plan.n_ladder[-1]
    if small != large:
        trend = rate_trend(*_counts(frame, small, "exited"), *_counts(frame, large, "exited"))
        report.add_verdict("exceedance_decreasing", **trend)
    return report


# ---------------------------------------------------------------------------
# hitting-time schedules
# ---------------------------------------------------------------------------

@raise_immediately
def _hitting_replica(task):
    S, params, x0 = task["S"], task["params"], task["x0"]
    size = int(x0.sum())
    checks = task["checks"]
    horizon = max(t for _, _, t in checks)
    stream = RngStream(task["seed"], task["stream"])
    row = {"N": task["N"], "replica": task["replica"], "start": task["start"]}
    if horizon > 0:
        traj = simulate(params, S, x0, horizon, stream.spawn(0), max_events=task["max_events"])
        times, states = traj.times, traj.states
    else:
        times, states = np.zeros(1), x0[None, :]
    dist = sup_norm(states / size - S.pi)
    chis = sup_norm(chi_rows(states) - S.pi)
    for name, delta, t in checks:
        hat = first_time(times, dist <= delta)
        tchi = first_time(times, chis <= delta)
        row.update({"T_hat_" + name: hat, "T_chi_" + name: tchi,
                    "exceed_hat_" + name: bool(hat > t), "exceed_chi_" + name: bool(tchi > t)})
    # closed network at s = -(1/eta) log(delta / 2B)
    delta, s = task["closed_check"]
    if s > 0:
        closed = simulate(params.closed(), S, x0, s, stream.spawn(1), max_events=task["max_events"])
        u = closed.state_at(s)
    else:
        u = x0
    row["closed_exceed"] = bool(float(sup_norm(u / size - S.pi)) > delta)
    return row


def hitting_time_run(plan, S, params, seed=0, workers=1):
    """Exceedances P(T_hat_delta > t_delta) and P(T_delta > t_delta), fixed delta and delta_N schedule."""
    if plan.delta is None and plan.delta_exponent is None:
        raise PreconditionViolated("hitting_time_run needs delta or a delta_N schedule")

    def checks_for(N):
        out = []
        if plan.delta is not None:
            out.append(("fixed", plan.delta, mixing_time(S, plan.delta)))
        if plan.delta_exponent is not None:
            d = plan.delta_N(N)
            out.append(("schedule", d, mixing_time(S, d)))
        return out

    _log_run("hitting times", plan, delta=plan.delta, delta_exponent=plan.delta_exponent)
    tasks = []
    for N in plan.n_ladder:
        checks = checks_for(N)
        closed_delta = checks[-1][1]
        for label, x0 in plan.starts(N, S.pi):
            for r in range(plan.replicas):
                tasks.append(dict(params=params, S=S, N=N, start=label, x0=x0, replica=r, seed=seed,
                                  stream=(N, r), checks=checks, max_events=plan.max_events,
                                  closed_check=(closed_delta, mixing_time(S, closed_delta, 2.0))))
    frame = pd.DataFrame(run_replicas(_hitting_replica, tasks, workers, desc="hitting"))
    report = EnsembleReport(experiment="hitting-time", frame=frame,
                            info={"schedule": schedule_table(plan, S),
                                  "t_delta": None if plan.delta is None else mixing_time(S, plan.delta)})
    small, large = plan.n_ladder[0], plan.n_ladder[-1]
    for name, _, _ in checks_for(small):
        for kind in ("hat", "chi"):
            column = "exceed_{}_{}".format(kind, name)
            worst = {N: _worst_start(frame, N, column) for N in plan.n_ladder}
            report.info.setdefault("worst_exceedance", {})[column] = {int(N): w[1] for N, w in worst.items()}
            if small != large:
                trend = rate_trend(*_counts(frame, small, column, worst[small][0]),
                                   *_counts(frame, large, column, worst[large][0]))
                report.add_verdict(column + "_decreasing", **trend)
    for N in plan.n_ladder:
        delta = checks_for(N)[-1][1]
        start, _ = _worst_start(frame, N, "closed_exceed")
        k, n = _counts(frame, N, "closed_exceed", start)
        upper = clopper_pearson_upper(k, n)
        bound = S.n / (delta * delta * N)
        report.add_verdict("chebyshev", upper <= bound, N=N, delta=delta, exceed=k, replicas=n,
                           upper_ci=upper, bound=bound)
    return report


def _worst_start(frame, N, column):
    rates = frame[frame.N == N].groupby("start")[column].mean()
    return str(rates.idxmax()), float(rates.max())


# ---------------------------------------------------------------------------
# ergodicity probe
# ---------------------------------------------------------------------------

@raise_immediately
def _ergodicity_replica(task):
    N = task["N"]
    traj = simulate(task["params"], task["S"], task["x0"], task["T"] * N, RngStream(task["seed"], task["stream"]),
                    max_events=task["max_events"])
    return {"N": N, "replica": task["replica"], "start": task["start"],
            "L_bar": float(traj.final.sum()) / N, "censored": bool(traj.truncated)}


def ergodicity_probe(plan, S, params, T=None, seed=0, workers=1, contrast=False, threshold=0.1):
    """max over corner starts of E[L(N T)/N] per N, with T = 1/(mu - lambda) by default."""
    expected = SUPERCRITICAL if contrast else SUBCRITICAL
    if params.regime != expected:
        raise RegimeMismatch("ergodicity probe{} needs a {} network, got {}"
                             .format(" contrast" if contrast else "", expected, params.regime))
    if T is None:
        T = plan.horizon if contrast else 1.0 / (params.mu - params.lam)

    def starts(N):
        return plan.starts(N, S.pi, CORNER) + plan.starts(N, S.pi, PROPORTIONAL)

    _log_run("ergodicity probe", plan, T=T, contrast=contrast)
    tasks = _tasks(plan, seed, starts, params=params, S=S, T=T)
    frame = pd.DataFrame(run_replicas(_ergodicity_replica, tasks, workers, desc="ergodicity"))
    means = frame.groupby(["N", "start"])["L_bar"].mean()
    corners = frame[frame.start.str.startswith("corner")]
    worst = corners.groupby(["N", "start"])["L_bar"].mean().groupby(level="N").agg(["max", "idxmax"])
    report = EnsembleReport(experiment="ergodicity", frame=frame,
                            info={"T": T, "contrast": contrast,
                                  "means": means.reset_index().to_dict(orient="records"),
                                  "worst_corner": {int(N): float(v) for N, v in worst["max"].items()}})
    small, large = plan.n_ladder[0], plan.n_ladder[-1]
    worst_large = float(worst.loc[large, "max"])
    if contrast:
        report.add_verdict("contrast_growth", worst_large > plan.a, worst=worst_large)
        return report
    if small != large:
        pick = lambda N: frame[(frame.N == N) & (frame.start == worst.loc[N, "idxmax"][1])]["L_bar"]
        trend = sign_trend(pick(small), pick(large))
        report.add_verdict("worst_corner_decreasing", **trend)
    report.add_verdict("worst_corner_threshold", worst_large < threshold, N=large, worst=worst_large,
                       threshold=threshold)
    return report
