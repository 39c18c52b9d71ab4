"""Experiment configuration: one YAML file with a schema version; unknown keys are errors."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .loss import LossWeights
from .nets import ModelConfig
from .phantom import PhantomSpec
from .pipeline import TrainConfig, split_indices

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    count: int = 64
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError(f"dataset.split must be three nonnegative fractions summing to 1, got {self.split}")
        sizes = {k: len(v) for k, v in split_indices(self.count, self.split).items()}
        if min(sizes.values()) == 0:
            raise ConfigError(f"dataset.count={self.count} leaves an empty split: {sizes}")


@dataclass
class PreprocessConfig:
    margin: int = 3
    target_hw: int = 32
    target_depth: int = 8


@dataclass
class StageConfig:
    """TrainConfig fields shared by both phases (phase and weights are filled in)."""

    learning_rate: float = 1e-3
    batch_size: int = 2
    epochs: int = 20
    seed: int = 0
    use_segnet_guidance: bool = True
    use_rvae: bool = True
    sample_dvf: bool = True
    latent_samples: int = 1
    checkpoint_every: int = 5
    max_steps: int | None = None
    printed_kl: bool = False


@dataclass
class EvalConfig:
    split: str = "test"
    spacing: tuple[float, float, float] | None = None   # None: use each sample's own spacing


@dataclass
class SweepConfig:
    rho: tuple[float, ...] = (0.0, 0.001, 0.01, 0.1)
    epochs: int = 5


@dataclass
class ExperimentConfig:
    version: int = SCHEMA_VERSION
    output: str = "runs/default"
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    pretrain: StageConfig = field(default_factory=lambda: StageConfig(epochs=20))
    train: StageConfig = field(default_factory=lambda: StageConfig(epochs=30))
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if self.version != SCHEMA_VERSION:
            raise ConfigError(f"config schema version {self.version} is not supported (expected {SCHEMA_VERSION})")

    def train_config(self, phase: int, seed: int | None = None, **overrides) -> TrainConfig:
        stage = self.pretrain if phase == 1 else self.train
        values = dataclasses.asdict(stage)
        if seed is not None:
            values["seed"] = seed
        values.update(overrides)
        return TrainConfig(phase=phase, weights=dataclasses.replace(self.weights), **values)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from nested dicts, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown key(s){where}: {', '.join(unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if "version" not in data:
        raise ConfigError("config is missing the schema 'version' key")
    cfg = from_dict(ExperimentConfig, data)
    out = Path(cfg.output)
    if not out.is_absolute():
        cfg.output = str((path.parent / out).resolve())
    return cfg


def dump(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
