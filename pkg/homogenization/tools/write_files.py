import os
import json

import numpy as np
import pandas as pd

from ..state import EVENT_NAMES

FLOAT_FORMAT = "%.17g"


def check_inside(output_dir, output_path):
    """Return the absolute path, refusing anything that resolves outside ``output_dir``."""
    root = os.path.realpath(output_dir)
    target = os.path.realpath(output_path)
    if os.path.commonpath([root, target]) != root:
        raise ValueError("refusing to write {} outside the output directory {}".format(output_path, output_dir))
    return target


def _prepare(output_dir, output_path):
    path = check_inside(output_dir, output_path)
    if not os.path.exists(os.path.dirname(path)):
        os.makedirs(os.path.dirname(path))
    return path


def _nodes(nodes):
    # 1-based node labels, 0 where the event has no such node
    return np.where(np.asarray(nodes) >= 0, np.asarray(nodes) + 1, 0)


def _event_frame(times, kinds, from_node, to_node):
    return pd.DataFrame({"time": times,
                         "event_kind": [EVENT_NAMES[int(k)] for k in kinds],
                         "from_node": _nodes(from_node),
                         "to_node": _nodes(to_node)})


def _add_block(frame, prefix, states):
    for i in range(states.shape[1]):
        frame["{}_{}".format(prefix, i + 1)] = states[:, i]


def write_trajectory(traj, output_path, output_dir):
    path = _prepare(output_dir, output_path)
    frame = _event_frame(traj.times, traj.kinds, traj.from_node, traj.to_node)
    _add_block(frame, "x", traj.states)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_triple(tp, output_path, output_dir):
    path = _prepare(output_dir, output_path)
    frame = _event_frame(tp.times, tp.kinds, tp.from_node, tp.to_node)
    for prefix, states in (("x", tp.x), ("y", tp.y), ("z", tp.z)):
        _add_block(frame, prefix, states)
    frame["N_lambda"] = tp.n_lambda
    frame["N_mu"] = tp.n_mu
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_report(frame, output_path, output_dir):
    path = _prepare(output_dir, output_path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def _to_builtin(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError("{} is not JSON serializable".format(type(obj).__name__))


def write_json(obj, output_path, output_dir):
    path = _prepare(output_dir, output_path)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_to_builtin)
        f.write("\n")
    return path


def write_manifest(cfg, version, output_dir, output_path=None):
    output_path = output_path or os.path.join(output_dir, "manifest.json")
    return write_json({"version": version, "seed": cfg.seed, "kind": cfg.kind, "config": cfg.to_dict()},
                      output_path, output_dir)
