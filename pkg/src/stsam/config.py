"""Run configuration: one YAML file plus dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import re
from pathlib import Path
from typing import Any, Optional

import yaml

from .dataio import DatasetMeta, SyntheticSpec
from .model import HyperParams
from .training import TrainConfig


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``1e-3``) as numbers."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def _parse(text: str):
    return yaml.load(text, Loader=_Loader)


DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "precision": "float64",
    "paths": {
        "data_csv": "data/flows.csv",
        "meta": "data/meta.json",
        "checkpoint": "out/model.ckpt",
        "output_dir": "out",
    },
    "model": {
        "d": 64,
        "M": 4,
        "k": 5,
        "ff_dim": 128,
        "n_blocks": 1,
        "dropout_rate": 0.1,
        "time_vocab": None,  # None: 7 * slots_per_day of the dataset
        "n_regions": None,  # None: taken from the dataset
        "attention_norm": "softmax",
        "head_split": False,
    },
    "train": {
        "learning_rate": 0.001,
        "batch_size": 64,
        "max_epochs": 100,
        "patience": 10,
    },
    "split": {"train_days": 40, "val_fraction": 0.2, "disallow_overlap": False},
    "normalize": True,
    "mape_threshold": 10.0,
    "synthetic": None,
}


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Set one dotted leaf, e.g. ``model.d=8`` or ``synthetic.seed=3``."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    value = _parse(raw) if raw else None
    parts = key.strip().split(".")
    node = cfg
    for part in parts[:-1]:
        if part not in node:
            raise ConfigError(f"unknown config key {key}")
        if node[part] is None:
            node[part] = {}
        node = node[part]
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {part} is not a section")
    leaf = parts[-1]
    if node is not cfg.get("synthetic") and leaf not in node:
        raise ConfigError(f"unknown config key {key}")
    node[leaf] = value


def load_config(path: Optional[str] = None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            raw = _parse(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = _merge(cfg, raw)
    for assignment in overrides:
        apply_override(cfg, assignment)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def provenance(cfg: dict) -> str:
    return f"config_sha256={config_hash(cfg)[:16]} seed={cfg['seed']}"


def hyperparams(cfg: dict, meta: Optional[DatasetMeta] = None) -> HyperParams:
    model = dict(cfg["model"])
    if model["time_vocab"] is None:
        model["time_vocab"] = meta.slots_per_week if meta is not None else 336
    if model["n_regions"] is None:
        model["n_regions"] = meta.n_regions if meta is not None else 200
    try:
        return HyperParams(**model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model section: {exc}") from None


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(seed=cfg["seed"], **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train section: {exc}") from None


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    section = cfg.get("synthetic")
    if not section:
        raise ConfigError("config has no synthetic section")
    try:
        return SyntheticSpec(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic section: {exc}") from None


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
