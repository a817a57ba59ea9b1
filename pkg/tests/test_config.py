import os

import pytest
import yaml

from homogenization.config import KINDS, ExperimentConfig, load_config, parse_config, prepare
from homogenization.errors import ConfigInvalid, SpectralRejection
from homogenization.cli import suite_configs


def _raw(**extra):
    raw = {"kind": "simulate", "Q": [[None, 1.0], [1.0, None]], "arrival_rates": [0.5, 0.5],
           "capacities": [1.0, 1.0], "initial_state": [3, 3], "t_max": 5.0}
    raw.update(extra)
    return raw


def test_minimal_config():
    cfg = parse_config(_raw())
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.n == 2
    assert cfg.params().regime == "subcritical"
    assert cfg.seed == 0 and cfg.workers == 1


@pytest.mark.parametrize("raw, field", [
    (_raw(colour="blue"), "colour"),
    (_raw(plan={"n_ladder": [10], "replica": 3}), "plan.replica"),
    (_raw(thresholds={"epsilon": 0.01, "eta": 1}), "thresholds.eta"),
    (_raw(kind="teleport"), "kind"),
    (_raw(arrival_rates=[0.5]), "arrival_rates"),
    (_raw(capacities=[1.0, -1.0]), "capacities[1]"),
    (_raw(Q=[[None, 1.0], [1.0]]), "Q[1]"),
    (_raw(initial_state=[1, 1.5]), "initial_state[1]"),
    (_raw(t_max=None), "t_max"),
    (_raw(seed=True), "seed"),
])
def test_invalid_fields(raw, field):
    with pytest.raises(ConfigInvalid) as info:
        parse_config(raw)
    assert info.value.field == field


def test_missing_required():
    raw = _raw()
    del raw["Q"]
    with pytest.raises(ConfigInvalid, match="Q: missing"):
        parse_config(raw)


def test_kind_requirements():
    with pytest.raises(ConfigInvalid, match="plan"):
        parse_config(_raw(kind="kelly"))
    with pytest.raises(ConfigInvalid, match="alphas"):
        parse_config(_raw(kind="martingale-check", times=[0.0, 1.0]))
    with pytest.raises(ConfigInvalid, match="alphas"):
        parse_config(_raw(kind="deviation-bound", alphas=[1.0], thresholds={"ell": [2]}))
    with pytest.raises(ConfigInvalid, match="plan.delta"):
        parse_config(_raw(kind="hitting-time", plan={"n_ladder": [10]}))


def test_plan_errors_are_config_errors():
    with pytest.raises(ConfigInvalid) as info:
        parse_config(_raw(kind="kelly", plan={"n_ladder": [10], "delta_exponent": 0.7}))
    assert info.value.field == "plan"


def test_fluid_regime_mismatch():
    with pytest.raises(ConfigInvalid) as info:
        parse_config(_raw(kind="fluid", regime="supercritical", plan={"n_ladder": [10]}))
    assert info.value.field == "regime"


def test_to_dict_round_trip():
    cfg = parse_config(_raw(kind="trapping", plan={"n_ladder": [50, 200], "replicas": 4, "rho": [0.2, 0.8]},
                            thresholds={"epsilon": 0.03, "delta": 0.01, "ell": [2, 4]}, alphas=[0.5],
                            contrast=True))
    assert parse_config(cfg.to_dict()) == cfg


def test_load_config(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(_raw(seed=9)))
    cfg = load_config(str(path))
    assert cfg.seed == 9
    assert cfg.Q[0][0] is None
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    with pytest.raises(ConfigInvalid, match="empty"):
        load_config(str(empty))


def test_prepare_rejects_reducible_Q():
    cfg = parse_config(_raw(Q=[[None, 0.0], [0.0, None]]))
    with pytest.raises(SpectralRejection):
        prepare(cfg)


def test_prepare_checks_epsilon_against_eps0():
    cfg = parse_config(_raw(kind="trapping", arrival_rates=[1.0, 1.0], capacities=[0.5, 0.5],
                            plan={"n_ladder": [100]}, thresholds={"epsilon": 0.05, "delta": 0.01}))
    with pytest.raises(ConfigInvalid) as info:
        prepare(cfg)
    assert info.value.field == "thresholds.epsilon"
    cfg = parse_config(_raw(kind="trapping", arrival_rates=[1.0, 1.0], capacities=[0.5, 0.5],
                            plan={"n_ladder": [100]}, thresholds={"epsilon": 0.03, "delta": 0.03}))
    with pytest.raises(ConfigInvalid, match="delta"):
        prepare(cfg)


def test_suite_configs_are_valid():
    kinds = set()
    for name, raw in suite_configs(3, quick=True):
        cfg = parse_config(raw)
        prepare(cfg)
        assert cfg.seed == 3
        kinds.add(cfg.kind)
    assert kinds == set(KINDS) - {"simulate"}


def test_example_configs_load():
    root = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
    kinds = set()
    for name in sorted(os.listdir(root)):
        cfg = load_config(os.path.join(root, name))
        prepare(cfg)
        kinds.add(cfg.kind)
    assert kinds == set(KINDS)
