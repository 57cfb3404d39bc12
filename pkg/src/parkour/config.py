"""Experiment configuration: strict JSON files mapped onto the training
dataclasses. Unknown keys are rejected at every nesting level so a typo in a
config file fails the run instead of silently training with defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .navigation import GridNoise, NavTrainConfig
from .perception import PerceptionTrainConfig
from .rl import PPOConfig
from .skills import SkillTrainConfig


@dataclass
class DatasetConfig:
    """Arguments for scripted-trajectory dataset generation."""

    path: str = "runs/perception/desk.pkpd"
    n_traj: int = 200
    steps: int = 50
    seed: int = 0
    dt: float = 0.1
    speed: float = 0.6
    worlds: tuple = ("world_a", "world_b", "world_c")
    difficulty_range: tuple = (0.2, 1.0)


@dataclass
class ExperimentConfig:
    """One experiment: a seed, a target (skill or world), and the per-module
    hyperparameter blocks. Every run serializes this next to its outputs."""

    seed: int = 0
    out_dir: str = "runs"
    skill: str = "walk"
    world_kind: str = "world_a"
    variant: str = "full"
    skill_train: SkillTrainConfig = field(default_factory=SkillTrainConfig)
    perception_train: PerceptionTrainConfig = field(default_factory=PerceptionTrainConfig)
    nav_train: NavTrainConfig = field(default_factory=NavTrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)


_NESTED = {PPOConfig, GridNoise, SkillTrainConfig, PerceptionTrainConfig,
           NavTrainConfig, DatasetConfig}


def _build_dataclass(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = _field_default(f)
        label = f"{where}.{name}"
        if type(default) in _NESTED or f.type in [c.__name__ for c in _NESTED]:
            sub_cls = type(default) if type(default) in _NESTED else None
            if sub_cls is None:
                sub_cls = next(c for c in _NESTED if c.__name__ == f.type)
            kwargs[name] = _build_dataclass(sub_cls, value, label)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigurationError(f"{label}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigurationError(f"{label}: expected a bool")
            kwargs[name] = value
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigurationError(f"{label}: expected a number")
            if isinstance(value, float) and value != int(value):
                raise ConfigurationError(f"{label}: expected an integer")
            kwargs[name] = int(value)
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigurationError(f"{label}: expected a number")
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _field_default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build_dataclass(ExperimentConfig, data, "config")


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}")
    return config_from_dict(data)


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if type(v) in _NESTED:
            out[f.name] = config_to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def default_config() -> dict:
    return config_to_dict(ExperimentConfig())


def canonical_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config_to_dict(cfg)).encode()).hexdigest()


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=1, sort_keys=True)
        f.write("\n")
