import json

import numpy as np
import pandas as pd

from ..config import parse_config
from ..state import EVENT_CODES, replay


def read_manifest(path_to_manifest):
    """Return (config, manifest dict); the config is re-validated from its echo."""
    with open(path_to_manifest, "r") as f:
        manifest = json.load(f)
    return parse_config(manifest["config"]), manifest


def read_report(path_to_report):
    return pd.read_csv(path_to_report)


def read_trajectory(path_to_trajectory, horizon=None):
    """Rebuild a Trajectory from its CSV; the horizon defaults to the last epoch."""
    frame = pd.read_csv(path_to_trajectory)
    columns = [c for c in frame.columns if c.startswith("x_")]
    if not columns or frame.shape[0] == 0:
        raise TypeError("trajectory file needs to hold an initial row and x_* columns")
    x0 = frame.loc[0, columns].to_numpy(dtype=np.int64)
    events = frame.iloc[1:]
    kinds = [EVENT_CODES[k] for k in events["event_kind"]]
    times = events["time"].to_numpy(dtype=float)
    horizon = float(frame["time"].iloc[-1]) if horizon is None else horizon
    return replay(x0, times, kinds, events["from_node"].to_numpy() - 1, events["to_node"].to_numpy() - 1, horizon)
