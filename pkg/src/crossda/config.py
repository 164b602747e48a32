"""Training configurations, ablation presets and strict YAML loading."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import yaml


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DAConfig:
    lambda_gan: float = 1.0
    lambda_id: float = 5.0
    lambda_cyc: float = 5.0
    lambda_seg: float = 1.0
    gp_weight: float = 10.0
    learning_rate: float = 1e-4
    batch_size: int = 48
    epochs: int = 25
    steps: Optional[int] = None  # overrides epochs when set
    patch_size: int = 64
    seed: int = 0
    augment_rot90: bool = True
    augment_flip: bool = True
    classifier: Optional[str] = None
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lambda_gan", "lambda_id", "lambda_cyc", "lambda_seg", "gp_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("batch_size", "epochs", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def replace(self, **changes) -> "DAConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# One row per ablation in the comparison table, plus an identity-only run.
DA_PRESETS: dict[str, dict] = {
    "full-da": {},
    "no-id": {"lambda_id": 0.0},
    "no-seg": {"lambda_seg": 0.0},
    "no-cyc-seg": {"lambda_cyc": 0.0, "lambda_seg": 0.0},
    "no-seg-id": {"lambda_seg": 0.0, "lambda_id": 0.0},
    "classical-gan": {"lambda_id": 0.0, "lambda_cyc": 0.0, "lambda_seg": 0.0},
    "identity-only": {"lambda_gan": 0.0, "lambda_id": 100.0, "lambda_cyc": 0.0, "lambda_seg": 0.0},
}


def da_preset(name: str, **overrides) -> DAConfig:
    try:
        base = DA_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(DA_PRESETS)}") from None
    return DAConfig(**{**base, **overrides})


@dataclass(frozen=True)
class CloudTrainConfig:
    steps: int = 250_000
    batch_size: int = 64
    patch_size: int = 32
    learning_rate: float = 1e-4
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        for name in ("steps", "batch_size", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.patch_size % 4:
            raise ConfigError("patch_size must be divisible by 4")

    def replace(self, **changes) -> "CloudTrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def from_mapping(cls, data: dict):
    """Build ``cls`` from a mapping, rejecting keys outside its schema."""
    data = dict(data or {})
    allowed = {f.name for f in fields(cls)}
    preset = data.pop("preset", None)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    if preset is not None:
        if cls is not DAConfig:
            raise ConfigError("unknown config key(s): preset")
        return da_preset(preset, **data)
    return cls(**data)


def load_config(path, cls):
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return from_mapping(cls, data)


def dump_config(cfg, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
