"""Run configuration: one JSON document with a section per pipeline stage.

Scalar fields can be overridden from the command line with dotted paths,
e.g. ``--set train.epochs=10 --set network.activation=relu``. Override values
are parsed as JSON when possible and kept as strings otherwise.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .autodecoder import LossConfig, NetworkConfig
from .training import TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "run_dir": "run",
    "data": {
        "source": "synthetic",
        # explicit SequenceSpec dicts; when empty, ``desk`` generates a mixed population
        "specs": [],
        "desk": {"count": 8, "frames": 10},
        "mask_dirs": [],
        "grid_dims": [64, 64, 64],
        "frames": None,
        "sample_count": 20000,
        "near_fraction": 0.7,
        "band": 0.03,
        "write_truth": True,
        "voxel_size_nm": [125.0, 125.0, 125.0],
    },
    "network": NetworkConfig().to_dict(),
    "loss": LossConfig().to_dict(),
    # the training seed is the root ``seed``
    "train": {**{k: v for k, v in TrainConfig().to_dict().items() if k != "seed"}, "resume": None},
    "generate": {
        "checkpoint": None,
        "mode": None,
        "sequence_ids": None,
        "count": None,
        "stddev": None,
        "grid_dims": [64, 64, 64],
        "frames": None,
        "tau_range": [-1.0, 1.0],
        "factor": 2,
        "write_grids": True,
        "write_meshes": False,
        "name": "seq",
    },
    "evaluate": {"reference": None, "candidate": None, "out_dir": None},
    "mesh": {"grid_dir": None, "iso": 0.0, "units": "normalized", "binary": False},
}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    path, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.strip().split("."), value


def apply_override(cfg: dict, keys: list[str], value) -> None:
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config section {'.'.join(keys[:-1])!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
    node[keys[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        cfg = deep_merge(cfg, user)
    for item in overrides:
        apply_override(cfg, *parse_override(item))
    return cfg


def network_config(cfg: dict) -> NetworkConfig:
    return NetworkConfig.from_dict(cfg["network"])


def loss_config(cfg: dict) -> LossConfig:
    return LossConfig(**cfg["loss"])


def train_config(cfg: dict) -> TrainConfig:
    d = {k: v for k, v in cfg["train"].items() if k != "resume"}
    return TrainConfig(**d, seed=int(cfg["seed"]))
