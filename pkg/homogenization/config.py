"""YAML experiment configs with a strict schema."""
import math
import logging
from dataclasses import dataclass, field, fields, asdict

import yaml

from .errors import ConfigInvalid, SpectralError, SpectralRejection, InvalidParams
from .scaling import ScalingPlan, INITIAL_RECIPES
from .spectral import rate_matrix, validate
from .state import NetworkParams, REGIMES, epsilon_zero

logger = logging.getLogger(__name__)

KINDS = ("simulate", "kelly", "fluid", "drift", "trapping", "subcritical-exit", "ergodicity",
         "martingale-check", "deviation-bound", "identity-suite", "hitting-time", "coupling-check")

# kinds that need an integer start
NEEDS_INITIAL_STATE = ("simulate", "drift", "martingale-check", "deviation-bound")
NEEDS_PLAN = ("kelly", "fluid", "trapping", "subcritical-exit", "ergodicity", "hitting-time")


@dataclass(frozen=True)
class Thresholds:
    epsilon: float = None
    delta: float = None
    ell: tuple = ()
    tolerance: float = 0.1
    pass_fraction: float = 0.95


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    Q: tuple
    arrival_rates: tuple
    capacities: tuple
    seed: int = 0
    output_dir: str = "./runs"
    workers: int = 1
    plan: ScalingPlan = None
    thresholds: Thresholds = field(default_factory=Thresholds)
    alphas: tuple = ()
    times: tuple = ()
    regime: str = None
    t_max: float = None
    initial_state: tuple = None
    contrast: bool = False
    max_initial: int = 8

    @property
    def n(self):
        return len(self.Q)

    def params(self):
        return NetworkParams(self.arrival_rates, self.capacities)

    def spectral(self):
        try:
            return validate(rate_matrix([list(row) for row in self.Q]))
        except SpectralError as e:
            raise SpectralRejection(e)

    def to_dict(self):
        """Plain-YAML view of the config; ``parse_config(cfg.to_dict()) == cfg``."""
        out = asdict(self)
        out["Q"] = [list(row) for row in self.Q]
        for key in ("arrival_rates", "capacities", "alphas", "times", "initial_state"):
            if out[key] is not None:
                out[key] = list(out[key])
        out["thresholds"]["ell"] = list(out["thresholds"]["ell"])
        if out["plan"] is not None:
            out["plan"] = {k: list(v) if isinstance(v, tuple) else v for k, v in out["plan"].items()}
        return out


# ---------------------------------------------------------------------------
# field readers
# ---------------------------------------------------------------------------

def _number(value, path, positive=False, allow_zero=True):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigInvalid(path, "needs to be a number, got {!r}".format(value))
    value = float(value)
    if not math.isfinite(value):
        raise ConfigInvalid(path, "needs to be finite")
    if positive and (value < 0 or (value == 0 and not allow_zero)):
        raise ConfigInvalid(path, "needs to be {}".format("non-negative" if allow_zero else "positive"))
    return value


def _integer(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigInvalid(path, "needs to be an integer, got {!r}".format(value))
    if minimum is not None and value < minimum:
        raise ConfigInvalid(path, "needs to be at least {}".format(minimum))
    return value


def _numbers(value, path, length=None, positive=False):
    if not isinstance(value, list):
        raise ConfigInvalid(path, "needs to be a list")
    if length is not None and len(value) != length:
        raise ConfigInvalid(path, "needs {} entries, got {}".format(length, len(value)))
    return tuple(_number(v, "{}[{}]".format(path, k), positive=positive) for k, v in enumerate(value))


def _string(value, path, choices):
    if value not in choices:
        raise ConfigInvalid(path, "needs to be one of {}, got {!r}".format(", ".join(choices), value))
    return value


def _section(raw, path, allowed):
    if not isinstance(raw, dict):
        raise ConfigInvalid(path, "needs to be a mapping")
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigInvalid("{}.{}".format(path, unknown[0]) if path else unknown[0], "unknown key")
    return raw


def _parse_Q(raw):
    if not isinstance(raw, list) or not raw or not all(isinstance(row, list) for row in raw):
        raise ConfigInvalid("Q", "needs to be a list of rows")
    n = len(raw)
    rows = []
    for i, row in enumerate(raw):
        if len(row) != n:
            raise ConfigInvalid("Q[{}]".format(i), "needs {} entries, got {}".format(n, len(row)))
        parsed = []
        for j, v in enumerate(row):
            if v is None and i == j:
                parsed.append(None)
            else:
                parsed.append(_number(v, "Q[{}][{}]".format(i, j)))
        rows.append(tuple(parsed))
    return tuple(rows)


_PLAN_FIELDS = {f.name for f in fields(ScalingPlan)}


def _parse_plan(raw, n):
    raw = _section(raw, "plan", _PLAN_FIELDS)
    if "n_ladder" not in raw:
        raise ConfigInvalid("plan.n_ladder", "missing")
    kwargs = {}
    if not isinstance(raw["n_ladder"], list) or not raw["n_ladder"]:
        raise ConfigInvalid("plan.n_ladder", "needs to be a non-empty list")
    kwargs["n_ladder"] = tuple(_integer(v, "plan.n_ladder[{}]".format(k), 1) for k, v in enumerate(raw["n_ladder"]))
    if "replicas" in raw:
        kwargs["replicas"] = _integer(raw["replicas"], "plan.replicas", 2)
    if "max_events" in raw:
        kwargs["max_events"] = _integer(raw["max_events"], "plan.max_events", 1)
    for key in ("horizon", "window_start", "a", "delta_scale"):
        if key in raw:
            kwargs[key] = _number(raw[key], "plan." + key, positive=True, allow_zero=key == "window_start")
    for key in ("delta", "delta_exponent"):
        if raw.get(key) is not None:
            kwargs[key] = _number(raw[key], "plan." + key, positive=True, allow_zero=False)
    if "initial" in raw:
        kwargs["initial"] = _string(raw["initial"], "plan.initial", INITIAL_RECIPES)
    for key in ("rho", "custom_state"):
        if raw.get(key) is not None:
            kwargs[key] = _numbers(raw[key], "plan." + key, length=n, positive=True)
    try:
        return ScalingPlan(**kwargs)
    except InvalidParams as e:
        raise ConfigInvalid("plan", str(e))


def _parse_thresholds(raw):
    raw = _section(raw, "thresholds", {f.name for f in fields(Thresholds)})
    kwargs = {}
    for key in ("epsilon", "delta"):
        if raw.get(key) is not None:
            kwargs[key] = _number(raw[key], "thresholds." + key, positive=True, allow_zero=False)
    if "ell" in raw:
        kwargs["ell"] = _numbers(raw["ell"], "thresholds.ell", positive=True)
    if "tolerance" in raw:
        kwargs["tolerance"] = _number(raw["tolerance"], "thresholds.tolerance", positive=True, allow_zero=False)
    if "pass_fraction" in raw:
        value = _number(raw["pass_fraction"], "thresholds.pass_fraction")
        if not 0 < value <= 1:
            raise ConfigInvalid("thresholds.pass_fraction", "needs to lie in (0, 1]")
        kwargs["pass_fraction"] = value
    return Thresholds(**kwargs)


_TOP_FIELDS = {f.name for f in fields(ExperimentConfig)}


def parse_config(raw):
    """Validate a raw mapping (e.g. from YAML) into an ExperimentConfig."""
    raw = _section(raw, "", _TOP_FIELDS)
    for key in ("kind", "Q", "arrival_rates", "capacities"):
        if key not in raw:
            raise ConfigInvalid(key, "missing")
    kind = _string(raw["kind"], "kind", KINDS)
    Q = _parse_Q(raw["Q"])
    n = len(Q)
    kwargs = dict(kind=kind, Q=Q,
                  arrival_rates=_numbers(raw["arrival_rates"], "arrival_rates", length=n, positive=True),
                  capacities=_numbers(raw["capacities"], "capacities", length=n, positive=True))
    if "seed" in raw:
        kwargs["seed"] = _integer(raw["seed"], "seed", 0)
    if "workers" in raw:
        kwargs["workers"] = _integer(raw["workers"], "workers", 1)
    if "output_dir" in raw:
        if not isinstance(raw["output_dir"], str) or not raw["output_dir"]:
            raise ConfigInvalid("output_dir", "needs to be a path")
        kwargs["output_dir"] = raw["output_dir"]
    if raw.get("plan") is not None:
        kwargs["plan"] = _parse_plan(raw["plan"], n)
    if raw.get("thresholds") is not None:
        kwargs["thresholds"] = _parse_thresholds(raw["thresholds"])
    if "alphas" in raw:
        kwargs["alphas"] = _numbers(raw["alphas"], "alphas", positive=True)
    if "times" in raw:
        kwargs["times"] = _numbers(raw["times"], "times", positive=True)
    if raw.get("regime") is not None:
        kwargs["regime"] = _string(raw["regime"], "regime", REGIMES)
    if raw.get("t_max") is not None:
        kwargs["t_max"] = _number(raw["t_max"], "t_max", positive=True, allow_zero=False)
    if raw.get("initial_state") is not None:
        state = raw["initial_state"]
        if not isinstance(state, list) or len(state) != n:
            raise ConfigInvalid("initial_state", "needs {} integer entries".format(n))
        kwargs["initial_state"] = tuple(_integer(v, "initial_state[{}]".format(k), 0) for k, v in enumerate(state))
    if "contrast" in raw:
        if not isinstance(raw["contrast"], bool):
            raise ConfigInvalid("contrast", "needs to be true or false")
        kwargs["contrast"] = raw["contrast"]
    if "max_initial" in raw:
        kwargs["max_initial"] = _integer(raw["max_initial"], "max_initial", 0)
    cfg = ExperimentConfig(**kwargs)
    _check_kind(cfg)
    return cfg


def _check_kind(cfg):
    kind = cfg.kind
    if kind in NEEDS_PLAN and cfg.plan is None:
        raise ConfigInvalid("plan", "required for kind '{}'".format(kind))
    if kind in NEEDS_INITIAL_STATE and cfg.initial_state is None:
        raise ConfigInvalid("initial_state", "required for kind '{}'".format(kind))
    if kind in ("simulate", "drift") and cfg.t_max is None:
        raise ConfigInvalid("t_max", "required for kind '{}'".format(kind))
    if kind == "martingale-check":
        if not cfg.alphas or not cfg.times:
            raise ConfigInvalid("alphas" if not cfg.alphas else "times", "required for kind 'martingale-check'")
        if any(not 0 < a <= 1 for a in cfg.alphas):
            raise ConfigInvalid("alphas", "needs values in (0, 1]")
    if kind == "deviation-bound":
        if not cfg.alphas or not cfg.thresholds.ell:
            raise ConfigInvalid("alphas" if not cfg.alphas else "thresholds.ell",
                                "required for kind 'deviation-bound'")
        if any(not 0 < a < 1 for a in cfg.alphas):
            raise ConfigInvalid("alphas", "needs values in (0, 1)")
    if kind == "subcritical-exit" and not cfg.times:
        raise ConfigInvalid("times", "required for kind 'subcritical-exit'")
    if kind == "hitting-time" and cfg.plan.delta is None and cfg.plan.delta_exponent is None:
        raise ConfigInvalid("plan.delta", "hitting-time needs plan.delta or plan.delta_exponent")
    if kind == "fluid":
        if cfg.regime is None:
            raise ConfigInvalid("regime", "required for kind 'fluid'")
        actual = cfg.params().regime
        if cfg.regime != actual:
            raise ConfigInvalid("regime", "declared '{}' but the rates give a {} network".format(cfg.regime, actual))


def check_thresholds(cfg, S):
    """Validate eps/delta against eps0 of pi where the experiment relies on them."""
    if cfg.kind not in ("trapping", "deviation-bound", "subcritical-exit"):
        return
    _, eps0 = epsilon_zero(S.pi)
    eps, delta = cfg.thresholds.epsilon, cfg.thresholds.delta
    if eps is None:
        raise ConfigInvalid("thresholds.epsilon", "required for kind '{}'".format(cfg.kind))
    if not eps < eps0:
        raise ConfigInvalid("thresholds.epsilon", "needs to be below eps0 = {:.6g}".format(eps0))
    if cfg.kind != "subcritical-exit":
        if delta is None or not delta < eps:
            raise ConfigInvalid("thresholds.delta", "needs 0 < delta < epsilon")


def load_config(path):
    with open(path, "r") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigInvalid(str(path), "not valid YAML: {}".format(e))
    if raw is None:
        raise ConfigInvalid(str(path), "empty config")
    cfg = parse_config(raw)
    logger.info("Loaded %s config from %s (n=%d)", cfg.kind, path, cfg.n)
    return cfg


def prepare(cfg):
    """Spectral validation first, then the eps0 checks; returns (params, S)."""
    S = cfg.spectral()
    check_thresholds(cfg, S)
    return cfg.params(), S
