"""Command-line entry point: ``run <config>``, ``describe <config>`` and ``seed-suite``."""
import os
import sys
import math
import argparse
import logging
from dataclasses import replace

import numpy as np
import pandas as pd

from . import __version__
from .config import load_config, parse_config, prepare
from .errors import CertificationFailed, HomogenizationError
from .martingale import (deviation_bound_check, identity_suite, integrability_bound, martingale_constancy)
from .scaling import (DeviationReport, drift_run, ergodicity_probe, extinction_time, fluid_run, hitting_time_run,
                      kelly_run, mixing_time, schedule_table, subcritical_exit_run, trapping_run)
from .simulator import DEFAULT_MAX_EVENTS, pathwise_checks, simulate
from .spectral import random_rate_matrix, stationary_distribution
from .state import SUBCRITICAL, entropy_norm_constants, epsilon_zero
from .tools.plot_reports import plot_deviation_trace, plot_deviation_vs_N
from .tools.write_files import write_json, write_manifest, write_report, write_trajectory
from .utils import RngStream

logger = logging.getLogger(__name__)


def run_parse_args(argv=None):
    parser = argparse.ArgumentParser(prog="homogenization")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="run the experiment described by a config file")
    run_parser.add_argument("config", type=str)
    describe_parser = commands.add_parser("describe", help="print derived quantities without simulating")
    describe_parser.add_argument("config", type=str)
    suite_parser = commands.add_parser("seed-suite", help="run the full acceptance battery")
    suite_parser.add_argument("--quick", action="store_true", help="reduced ladders, replicas and horizons")
    suite_parser.add_argument("--trapping_horizon", type=float, default=None,
                              help="fluid horizon of the trapping run (default 50, 1 with --quick)")

    for sub in (run_parser, describe_parser, suite_parser):
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--output_dir", type=str, default=None)
        sub.add_argument("--workers", type=int, default=None)
        sub.add_argument("--verbose", action="store_true")
    return parser.parse_args(argv)


def apply_overrides(cfg, args):
    changes = {key: getattr(args, key) for key in ("seed", "output_dir", "workers")
               if getattr(args, key, None) is not None}
    return replace(cfg, **changes) if changes else cfg


# ---------------------------------------------------------------------------
# experiment handlers: each returns (result dict, hard failure flag)
# ---------------------------------------------------------------------------

def _paths(cfg, default):
    return cfg.plan.replicas if cfg.plan is not None else default


def _max_events(cfg):
    return cfg.plan.max_events if cfg.plan is not None else DEFAULT_MAX_EVENTS


def _write_ensemble(report, out):
    write_report(report.frame, os.path.join(out, "replicas.csv"), out)
    if report.trace is not None and not report.trace.empty:
        write_report(report.trace, os.path.join(out, "trace.csv"), out)
        plot_deviation_trace(report.trace, os.path.join(out, "deviation_trace.png"), out, title=report.experiment)
    if isinstance(report, DeviationReport):
        plot_deviation_vs_N(report.frame, os.path.join(out, "deviation_vs_N.png"), out, tolerance=report.tolerance)
    return report.summary(), report.hard_failed


def _simulate(cfg, params, S, out):
    traj = simulate(params, S, cfg.initial_state, cfg.t_max, RngStream(cfg.seed), max_events=_max_events(cfg))
    write_trajectory(traj, os.path.join(out, "trajectory.csv"), out)
    violations = traj.event_violations()
    return {"events": traj.num_events, "final_state": traj.final, "truncated": traj.truncated,
            "event_violations": violations}, violations > 0


def _kelly(cfg, params, S, out):
    th = cfg.thresholds
    return _write_ensemble(kelly_run(cfg.plan, S, params, seed=cfg.seed, workers=cfg.workers,
                                     tolerance=th.tolerance, pass_fraction=th.pass_fraction), out)


def _fluid(cfg, params, S, out):
    th = cfg.thresholds
    return _write_ensemble(fluid_run(cfg.plan, S, params, cfg.regime, seed=cfg.seed, workers=cfg.workers,
                                     tolerance=th.tolerance, pass_fraction=th.pass_fraction), out)


def _drift(cfg, params, S, out):
    th = cfg.thresholds
    report = drift_run(S, params, cfg.initial_state, cfg.t_max, paths=_paths(cfg, 100), seed=cfg.seed,
                       workers=cfg.workers, tolerance=th.tolerance, pass_fraction=th.pass_fraction,
                       max_events=_max_events(cfg))
    return _write_ensemble(report, out)


def _trapping(cfg, params, S, out):
    th = cfg.thresholds
    return _write_ensemble(trapping_run(cfg.plan, S, params, th.epsilon, th.delta, seed=cfg.seed,
                                        workers=cfg.workers, contrast=cfg.contrast), out)


def _subcritical_exit(cfg, params, S, out):
    results, frames, hard = [], [], False
    for t in cfg.times:
        report = subcritical_exit_run(cfg.plan, S, params, cfg.thresholds.epsilon, t, seed=cfg.seed,
                                      workers=cfg.workers)
        frames.append(report.frame.assign(t=t))
        results.append(report.summary())
        hard = hard or report.hard_failed
    write_report(pd.concat(frames, ignore_index=True), os.path.join(out, "replicas.csv"), out)
    return {"runs": results, "passed": all(r["passed"] for r in results)}, hard


def _ergodicity(cfg, params, S, out):
    return _write_ensemble(ergodicity_probe(cfg.plan, S, params, T=cfg.t_max, seed=cfg.seed, workers=cfg.workers,
                                            contrast=cfg.contrast), out)


def _hitting_time(cfg, params, S, out):
    return _write_ensemble(hitting_time_run(cfg.plan, S, params, seed=cfg.seed, workers=cfg.workers), out)


def _martingale_check(cfg, params, S, out):
    reports = []
    for k, alpha in enumerate(cfg.alphas):
        report = martingale_constancy(S, params, cfg.initial_state, alpha, cfg.times, _paths(cfg, 1000),
                                      RngStream(cfg.seed, k))
        reports.append(report.as_dict())
    rows = [dict(row, alpha=r["alpha"]) for r in reports for row in r["rows"]]
    write_report(pd.DataFrame(rows), os.path.join(out, "means.csv"), out)
    return {"alphas": reports, "passed": all(r["passed"] for r in reports)}, False


def _deviation_bound(cfg, params, S, out):
    th = cfg.thresholds
    report = deviation_bound_check(S, params, cfg.initial_state, th.epsilon, th.delta, cfg.alphas, th.ell,
                                   _paths(cfg, 1000), RngStream(cfg.seed),
                                   horizon=cfg.t_max if cfg.t_max is not None else 50.0)
    write_report(pd.DataFrame(report.rows), os.path.join(out, "bounds.csv"), out)
    return report.as_dict(), False


def _identity_suite(cfg, params, S, out):
    alpha = cfg.alphas[0] if cfg.alphas else 0.5
    samples = _paths(cfg, 100)
    report = identity_suite(S, params, RngStream(cfg.seed), samples=samples, g_samples=min(samples, 20),
                            alpha=alpha)
    write_report(pd.DataFrame(report.rows), os.path.join(out, "identities.csv"), out)
    return report.as_dict(), not report.passed


def _coupling_check(cfg, params, S, out):
    horizon = cfg.plan.horizon if cfg.plan is not None else 2.0
    report = pathwise_checks(params, S, RngStream(cfg.seed), paths=_paths(cfg, 1000), horizon=horizon,
                             max_initial=cfg.max_initial)
    return report.as_dict(), not report.passed


EXPERIMENTS = {
    "simulate": _simulate,
    "kelly": _kelly,
    "fluid": _fluid,
    "drift": _drift,
    "trapping": _trapping,
    "subcritical-exit": _subcritical_exit,
    "ergodicity": _ergodicity,
    "martingale-check": _martingale_check,
    "deviation-bound": _deviation_bound,
    "identity-suite": _identity_suite,
    "hitting-time": _hitting_time,
    "coupling-check": _coupling_check,
}


def run(cfg):
    """Run one experiment, write manifest, replica CSVs and summary.json; return the exit status."""
    params, S = prepare(cfg)
    out = cfg.output_dir
    if not os.path.exists(out):
        os.makedirs(out)
    write_manifest(cfg, __version__, out)
    logger.info("***** Running %s *****", cfg.kind)
    logger.info("  Seed = %d", cfg.seed)
    logger.info("  Output dir = %s", out)
    result, hard_failed = EXPERIMENTS[cfg.kind](cfg, params, S, out)
    passed = bool(result.get("passed", not hard_failed)) and not hard_failed
    write_json({"kind": cfg.kind, "version": __version__, "seed": cfg.seed, "passed": passed,
                "hard_failed": bool(hard_failed), "result": result},
               os.path.join(out, "summary.json"), out)
    if hard_failed:
        logger.error("%s: hard invariant violated, see %s", cfg.kind, os.path.join(out, "summary.json"))
    elif not passed:
        logger.warning("%s: soft checks failed, see %s", cfg.kind, os.path.join(out, "summary.json"))
    return 1 if hard_failed else 0


def describe(cfg, stream=None):
    """Print derived quantities of a config without simulating."""
    stream = stream or sys.stdout
    params, S = prepare(cfg)
    eps_norm, eps_entropy = epsilon_zero(S.pi)
    a = cfg.plan.a if cfg.plan is not None else 1.0
    lines = [
        "kind = {}".format(cfg.kind),
        "n = {}".format(S.n),
        "pi = {}".format(np.array2string(S.pi, precision=6)),
        "eigenvalues = {}".format(np.array2string(S.eigenvalues, precision=6)),
        "theta (trace of -Q) = {:.6g}".format(S.theta),
        "eta (spectral gap) = {:.6g}".format(S.eta),
        "B = {:.6g}".format(S.B),
        "eps0 (norm) = {:.6g}".format(eps_norm),
        "eps0 (entropy) = {:.6g}".format(eps_entropy),
        "lambda = {:.6g}, mu = {:.6g} ({})".format(params.lam, params.mu, params.regime),
    ]
    if params.regime == SUBCRITICAL:
        lines.append("t_a = {:.6g}".format(extinction_time(params, a)))
    if cfg.plan is not None and cfg.plan.delta is not None:
        lines.append("t_delta = {:.6g} (delta = {:.6g})".format(mixing_time(S, cfg.plan.delta), cfg.plan.delta))
    if cfg.plan is not None:
        table = schedule_table(cfg.plan, S)
        if table:
            lines.append("{:>8} {:>12} {:>12} {:>12}".format("N", "delta_N", "s_N", "t_N"))
            for row in table:
                lines.append("{:>8d} {:>12.6g} {:>12.6g} {:>12.6g}".format(row["N"], row["delta_N"], row["s_N"],
                                                                         row["t_N"]))
    stream.write("\n".join(lines) + "\n")
    return lines


# ---------------------------------------------------------------------------
# acceptance battery
# ---------------------------------------------------------------------------

SYMMETRIC_Q = [[None, 1.0], [1.0, None]]
CYCLE_Q = [[None, 1.0, 0.0], [0.0, None, 1.0], [1.0, 0.0, None]]
TRAPPING_HORIZON = 50.0


def _network(Q, lam, mu):
    n = len(Q)
    return {"Q": Q, "arrival_rates": [lam / n] * n, "capacities": [mu / n] * n}


def suite_configs(seed, quick=False, trapping_horizon=None):
    """(name, raw config) pairs of the acceptance battery.

    Trapping runs to fluid time 50 (1 with ``quick``) unless ``trapping_horizon`` is given.
    """
    def pick(full, small):
        return small if quick else full

    Q4 = random_rate_matrix(4, np.random.default_rng(seed)).tolist()
    sub, sup, crit = (1.0, 2.0), (2.0, 1.0), (1.0, 1.0)
    ladder = pick([100, 1000], [20, 100])
    if trapping_horizon is None:
        trapping_horizon = pick(TRAPPING_HORIZON, 1.0)
    identity_plan = {"n_ladder": [1], "replicas": pick(100, 20)}
    configs = [
        ("identity-n2", dict(kind="identity-suite", plan=dict(identity_plan), **_network(SYMMETRIC_Q, *sub))),
        ("identity-n3", dict(kind="identity-suite", plan=dict(identity_plan), **_network(CYCLE_Q, *sub))),
        ("identity-n4", dict(kind="identity-suite", plan=dict(identity_plan), **_network(Q4, *sub))),
        ("coupling", dict(kind="coupling-check", plan={"n_ladder": [1], "replicas": pick(1000, 100)},
                          **_network(CYCLE_Q, *sub))),
        ("martingale", dict(kind="martingale-check", initial_state=[5, 5], alphas=[0.3, 0.7],
                            times=[0.0, 0.25, 0.5, 1.0], plan={"n_ladder": [1], "replicas": pick(10000, 500)},
                            **_network(SYMMETRIC_Q, *sub))),
        ("deviation-bound", dict(kind="deviation-bound", initial_state=[10, 10], alphas=[0.3, 0.5, 0.7],
                                 thresholds={"epsilon": 0.03, "delta": 0.01, "ell": [2, 4, 6]},
                                 plan={"n_ladder": [1], "replicas": pick(2000, 200)},
                                 **_network(SYMMETRIC_Q, *sub))),
        ("fluid-supercritical", dict(kind="fluid", regime="supercritical",
                                     plan={"n_ladder": ladder, "replicas": pick(50, 20)},
                                     **_network(SYMMETRIC_Q, *sup))),
        ("fluid-subcritical", dict(kind="fluid", regime="subcritical",
                                   plan={"n_ladder": ladder, "replicas": pick(50, 20)},
                                   **_network(SYMMETRIC_Q, *sub))),
        ("fluid-critical", dict(kind="fluid", regime="critical",
                                plan={"n_ladder": ladder, "replicas": pick(50, 20)},
                                **_network(SYMMETRIC_Q, *crit))),
        ("drift", dict(kind="drift", initial_state=[0, 0], t_max=pick(2000.0, 200.0),
                       thresholds={"tolerance": pick(0.05, 0.15)},
                       plan={"n_ladder": [1], "replicas": pick(100, 20)}, **_network(SYMMETRIC_Q, *sup))),
        ("trapping", dict(kind="trapping", thresholds={"epsilon": 0.03, "delta": 0.005},
                          plan={"n_ladder": pick([50, 200, 800], [20, 80]), "replicas": pick(50, 30),
                                "horizon": float(trapping_horizon)},
                          **_network(SYMMETRIC_Q, *sup))),
        ("subcritical-exit", dict(kind="subcritical-exit", thresholds={"epsilon": 0.03}, times=[0.5],
                                  plan={"n_ladder": ladder, "replicas": pick(50, 20)},
                                  **_network(SYMMETRIC_Q, *sub))),
        ("hitting-time", dict(kind="hitting-time",
                              plan={"n_ladder": pick([100, 300, 1000], [20, 100]), "replicas": pick(100, 30),
                                    "initial": "corner", "delta_exponent": 0.25},
                              **_network(SYMMETRIC_Q, *sub))),
        ("hitting-time-fixed", dict(kind="hitting-time",
                                    plan={"n_ladder": pick([100, 300, 1000], [20, 100]),
                                          "replicas": pick(100, 30), "initial": "corner", "delta": 0.1},
                                    **_network(SYMMETRIC_Q, *sub))),
        ("ergodicity", dict(kind="ergodicity", t_max=1.0,
                            plan={"n_ladder": pick([100, 300, 1000], [20, 60]), "replicas": pick(50, 20)},
                            **_network(SYMMETRIC_Q, *sub))),
        ("ergodicity-contrast", dict(kind="ergodicity", t_max=1.0, contrast=True,
                                     plan={"n_ladder": pick([100, 300, 1000], [20, 60]),
                                           "replicas": pick(50, 20)},
                                     **_network(SYMMETRIC_Q, *sup))),
        ("kelly", dict(kind="kelly", plan={"n_ladder": ladder, "replicas": pick(50, 20), "horizon": 1.0,
                                           "rho": [0.9, 0.1]},
                       **_network(SYMMETRIC_Q, *sub))),
        ("kelly-supercritical", dict(kind="kelly", plan={"n_ladder": ladder, "replicas": pick(50, 20),
                                                         "horizon": 1.0, "rho": [0.9, 0.1]},
                                     **_network(SYMMETRIC_Q, *sup))),
    ]
    for _, raw in configs:
        raw["seed"] = seed
    return configs


def certification_checks(seed, quick=False):
    """Entropy-norm constants on random pi and integrability of F^(alpha-1) for n = 2, 3."""
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(5):
        pi = stationary_distribution(random_rate_matrix(3, rng))
        try:
            C1, C2 = entropy_norm_constants(pi, step=0.02 if quick else 0.01)
            rows.append({"check": "entropy_constants", "case": k, "C1": C1, "C2": C2, "passed": True})
        except CertificationFailed as e:
            rows.append({"check": "entropy_constants", "case": k, "error": str(e), "passed": False})
    for Q in (SYMMETRIC_Q, CYCLE_Q):
        cfg = parse_config(dict(kind="identity-suite", **_network(Q, 1.0, 2.0)))
        report = integrability_bound(cfg.spectral(), [0.1, 0.3, 0.5, 1.0], level=2 if quick else 3)
        rows.append({"check": "integrability", "n": cfg.n, "sup": report.sup, "diverging": report.diverging,
                     "passed": not report.diverging and math.isfinite(report.sup)})
    return rows


def seed_suite(seed=0, output_dir="./runs/seed-suite", workers=1, quick=False, trapping_horizon=None):
    logger.info("***** Running seed suite *****")
    logger.info("  Quick = %s", quick)
    statuses = {}
    for name, raw in suite_configs(seed, quick, trapping_horizon):
        cfg = replace(parse_config(raw), output_dir=os.path.join(output_dir, name), workers=workers)
        try:
            statuses[name] = run(cfg)
        except HomogenizationError as e:
            logger.error("%s aborted: %s: %s", name, type(e).__name__, e)
            statuses[name] = 2
    rows = certification_checks(seed, quick)
    if not os.path.exists(output_dir):
        os.makedirs(output_dir)
    write_json({"version": __version__, "seed": seed, "quick": quick, "exit_status": statuses,
                "certification": rows}, os.path.join(output_dir, "suite.json"), output_dir)
    hard = [name for name, status in statuses.items() if status] + \
        [r["check"] for r in rows if r["check"] == "entropy_constants" and not r["passed"]]
    if hard:
        logger.error("Hard failures: %s", ", ".join(hard))
    return 1 if hard else 0


def main(argv=None):
    args = run_parse_args(argv)
    logging.basicConfig(format='%(asctime)s-%(levelname)s-%(name)s- %(message)s',
                        datefmt='%d %H:%M:%S',
                        level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        if args.command == "seed-suite":
            return seed_suite(seed=args.seed or 0, output_dir=args.output_dir or "./runs/seed-suite",
                              workers=args.workers or 1, quick=args.quick,
                              trapping_horizon=args.trapping_horizon)
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "describe":
            describe(cfg)
            return 0
        return run(cfg)
    except HomogenizationError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
