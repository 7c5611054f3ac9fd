"""Experiment configuration: nested dataclasses, YAML round-trip, overrides.

Desk-scale defaults train a small extractor for 12 epochs with batch 16 at
step size 1e-3; :func:`full_scale_optimizer` switches the optimizer block to the
full-scale preset (1e-5, batch 32, 20 epochs, step decay /10 every 10).
Every field is addressable by a dotted ``section.field=value`` override.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .backbone import BackboneConfig
from .heads import LossConfig
from .synthetic import SyntheticSceneSpec


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 12
    decay_every: int = 0  # 0 disables step decay
    decay_factor: float = 0.1

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def full_scale_optimizer() -> OptimizerConfig:
    """Full-scale optimizer preset; kept for parity, not used in desk runs."""
    return OptimizerConfig(
        learning_rate=1e-5, batch_size=32, epochs=20, decay_every=10, decay_factor=0.1
    )


@dataclass(frozen=True)
class ModuleToggles:
    """Ablation switches; (False, False, False) is the plain baseline."""

    instance_blend: bool = True
    prototype_blend: bool = True
    contrastive: bool = True
    vector_blend: bool = False  # blend pooled vectors instead of maps (prototype path)


@dataclass(frozen=True)
class DatasetConfig:
    """Either a synthetic scene spec or an on-disk image directory.

    For ``kind="directory"``, ``train_dir`` / ``test_dir`` hold PNGs plus a
    ``labels.csv`` with complete labels; ``known_labels_csv`` optionally
    points at a prepared partial split (otherwise labels are dropped on the
    fly at the run's proportion).
    """

    kind: str = "synthetic"  # "synthetic" | "directory"
    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    n_train: int = 2000
    n_test: int = 500
    train_dir: str | None = None
    test_dir: str | None = None
    known_labels_csv: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "directory"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "directory" and (not self.train_dir or not self.test_dir):
            raise ValueError("directory datasets need train_dir and test_dir")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    proportions: tuple[float, ...] = (0.5,)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    toggles: ModuleToggles = field(default_factory=ModuleToggles)
    embedding_dim: int = 64
    joint_dim: int = 64
    pool_mode: str = "sum"
    propagation_steps: int = 3
    adjacency: str = "uniform"  # "uniform" | "cooccurrence"
    grid_level: int = 1  # prototype bins per axis = 2**grid_level
    base_seed: int = 0
    checkpoint_every: int = 0  # 0: checkpoint only at the end
    embeddings_path: str | None = None

    def __post_init__(self) -> None:
        if not self.proportions:
            raise ValueError("at least one proportion is required")
        for p in self.proportions:
            if not 0.0 < p <= 1.0:
                raise ValueError(f"proportion {p} outside (0, 1]")
        if self.adjacency not in ("uniform", "cooccurrence"):
            raise ValueError(f"unknown adjacency mode {self.adjacency!r}")
        if not 0 <= self.grid_level <= 3:
            raise ValueError("grid_level must be in [0, 3]")


def _to_plain(obj: Any) -> Any:
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(x) for x in obj]
    if isinstance(obj, list):
        return [_to_plain(x) for x in obj]
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _to_plain(cfg)


_NESTED = {
    "dataset": DatasetConfig,
    "scene": SyntheticSceneSpec,
    "optimizer": OptimizerConfig,
    "loss": LossConfig,
    "backbone": BackboneConfig,
    "toggles": ModuleToggles,
}


def _from_dict(cls, data: dict):
    kwargs = {}
    names = {f.name for f in fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ValueError(f"unknown {cls.__name__} field {key!r}")
        if key in _NESTED and isinstance(value, dict):
            value = _from_dict(_NESTED[key], value)
        elif isinstance(value, list):
            value = tuple(tuple(x) if isinstance(x, list) else x for x in value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data or {})


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data or {})


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def _coerce(value: str, template: Any) -> Any:
    if isinstance(template, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {value!r}")
    if isinstance(template, int) and not isinstance(template, bool):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, tuple):
        parts = [p for p in value.split(",") if p != ""]
        inner = template[0] if template else 1.0
        return tuple(_coerce(p, inner) for p in parts)
    if template is None:
        return value
    return type(template)(value)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.field=value`` strings on top of a config.

    Values are coerced to the type of the field they replace; tuples parse
    from comma-separated lists (``proportions=0.1,0.5``).  All overrides
    land before the config re-validates, so related fields (such as the
    backbone stage tuples) may be changed together.
    """
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form path=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        template = cfg
        for key in keys:
            if not hasattr(template, key):
                raise ValueError(f"unknown config field {key!r} on {type(template).__name__}")
            template = getattr(template, key)
        node = data
        for key in keys[:-1]:
            node = node[key]
        node[keys[-1]] = _to_plain(_coerce(raw.strip(), template))
    return config_from_dict(data)
