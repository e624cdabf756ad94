"""Run configuration: YAML file + command-line overrides over defaults.

Precedence is command line > file > defaults. Unknown keys are rejected by
name so typos never pass silently, and every command echoes its resolved
configuration next to its outputs.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .core import ConfigurationError
from .losses import LossWeights
from .models import ArchConfig
from .training import TrainConfig


def _defaults() -> dict:
    return {
        "seed": 0,
        "workers": 1,
        "corpus": None,
        "val_corpus": None,
        "checkpoint": None,
        "residual": None,
        "output": "runs/out",
        "input": None,
        "message": None,  # hex string, L/4 digits
        "template": None,  # image path for residual creation
        "paradigm": "single_shot",
        "suite": None,  # path to a serialized distortion suite
        "roundtrip": False,
        "eval_batch_size": 8,
        "eval_batches": 8,
        "count": 100_000,  # bench image count
        "arch": ArchConfig().as_dict(),
        "train": _train_defaults(),
    }


def _train_defaults() -> dict:
    d = TrainConfig().as_dict()
    # seed and worker count live at the top level of the run config
    d.pop("seed")
    d.pop("workers")
    return d


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        here = f"{path}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown configuration key: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, here + ".")
        else:
            base[key] = value
    return base


def resolve_config(
    config_file: str | Path | None, overrides: dict | None = None
) -> dict:
    """Defaults ← file ← overrides, with unknown-key rejection at every level."""
    cfg = _defaults()
    if config_file:
        text = Path(config_file).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {config_file} must hold a mapping")
        _merge(cfg, data)
    if overrides:
        for dotted, value in overrides.items():
            node = cfg
            parts = dotted.split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigurationError(f"unknown configuration key: {dotted}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigurationError(f"unknown configuration key: {dotted}")
            node[parts[-1]] = value
    return cfg


def arch_from_config(cfg: dict) -> ArchConfig:
    return ArchConfig.from_dict(cfg["arch"])


def train_from_config(cfg: dict) -> TrainConfig:
    d = dict(cfg["train"])
    d["weights"] = LossWeights(**d["weights"])
    d["seed"] = cfg["seed"]
    d["workers"] = cfg["workers"]
    return TrainConfig(**d)


def echo_config(cfg: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path
