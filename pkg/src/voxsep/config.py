"""Run configuration: a versioned, strictly validated YAML schema.

Unknown keys are rejected at every nesting level so a typo in an
experiment sweep fails loudly instead of silently using a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentConfig
from .model import PRESETS
from .training import LossWeights, LrSchedule
from .vad import DEFAULT_TAU, VadTrainConfig

CONFIG_VERSION = 1


class ConfigError(Exception):
    """Raised on malformed, unknown-key, or wrong-version configuration."""


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "small"
    iterations: int = 2000
    batch_size: int = 1
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}"
            )
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be >= 1")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    deterministic: bool = True
    teacher: TrainConfig = field(default_factory=lambda: TrainConfig(preset="medium"))
    student: TrainConfig = field(default_factory=lambda: TrainConfig(preset="large"))
    vad: VadTrainConfig = field(default_factory=VadTrainConfig)
    tau: float = DEFAULT_TAU
    top_fraction: float = 0.25
    min_gain_db: float = 0.1
    max_generations: int = 1
    union_weighting: str = "uniform"
    manifest: str | None = None
    workdir: str | None = None

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(
                f"config version {self.version} unsupported (expected {CONFIG_VERSION})"
            )
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must be in [0, 1]")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ConfigError("top_fraction must be in (0, 1]")
        if self.max_generations < 1:
            raise ConfigError("max_generations must be >= 1")
        if self.union_weighting not in ("uniform", "balanced"):
            raise ConfigError("union_weighting must be 'uniform' or 'balanced'")

    def with_seed(self, seed: int) -> "RunConfig":
        """Derive per-phase seeds from one master seed."""
        return dataclasses.replace(
            self,
            seed=seed,
            teacher=dataclasses.replace(self.teacher, seed=seed),
            student=dataclasses.replace(self.student, seed=seed + 1),
            vad=dataclasses.replace(self.vad, seed=seed + 2),
        )


_TUPLE_FIELDS = {"gain_db_range", "pitch_semitone_range", "lowpass_cutoff_hz_range",
                 "eq_center_hz_range", "eq_gain_db_range", "eq_q_range",
                 "leakage_range", "channel_schedule", "kernel"}


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub_path = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, str) and f.type in _DATACLASS_NAMES
        ):
            sub_cls = _DATACLASS_NAMES.get(f.type, f.type) if isinstance(f.type, str) else f.type
            kwargs[name] = _build(sub_cls, value, sub_path)
        elif name in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


_DATACLASS_NAMES = {
    "AugmentConfig": AugmentConfig,
    "LrSchedule": LrSchedule,
    "LossWeights": LossWeights,
    "TrainConfig": TrainConfig,
    "VadTrainConfig": VadTrainConfig,
}


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def to_yaml(config: RunConfig) -> str:
    return yaml.safe_dump(_to_plain(config), sort_keys=False)


def from_yaml(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    if data is None:
        data = {}
    return _build(RunConfig, data, "")


def save_config(config: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_yaml(config))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return from_yaml(path.read_text())
