"""Experiment configuration: one file with named sections, strict keys, full defaults on save."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .design import CouplingMode
from .env import TaskConfig
from .ppo import PpoConfig
from .rewards import CommandFrame, RewardWeights
from .sim import ResetRanges, SimParams


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending section and key."""


@dataclass(frozen=True)
class BoConfig:
    mode: str = "Coupled1D"
    budget: int = 20
    phase_fractions: tuple = (0.4, 0.4)
    beta_start: float = 4.0
    beta_end: float = 1.0
    n_starts: int = 8
    seeds_per_design: int = 1

    def __post_init__(self):
        CouplingMode.parse(self.mode)
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        a, b = self.phase_fractions
        if a < 0 or b <= 0 or a + b > 1:
            raise ValueError("phase_fractions must be non-negative and sum to at most 1")
        if self.seeds_per_design < 1 or self.n_starts < 1:
            raise ValueError("seeds_per_design and n_starts must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimParams = field(default_factory=SimParams)
    task: TaskConfig = field(default_factory=TaskConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    bo: BoConfig = field(default_factory=BoConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    @property
    def frame(self) -> CommandFrame:
        return self.task.command_frame

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed))

    def with_output(self, out) -> "ExperimentConfig":
        return dataclasses.replace(self, output_dir=str(out))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


SECTIONS = {"sim": SimParams, "task": TaskConfig, "reward": RewardWeights, "ppo": PpoConfig, "bo": BoConfig}
NESTED = {("task", "reset"): ResetRanges}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(section: str, key: str, default, value):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"[{section}] {key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"[{section}] {key}: must be finite, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] {key}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, section: str, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"[{section}] unknown key {unknown[0]!r} (allowed: {', '.join(sorted(known))})")
    defaults = cls()
    kwargs = {}
    for key, value in raw.items():
        nested = NESTED.get((section, key))
        if nested is not None:
            kwargs[key] = _build(nested, f"{section}.{key}", value)
        else:
            kwargs[key] = _coerce(section, key, getattr(defaults, key), value)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    allowed = set(SECTIONS) | {"output_dir", "seed"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"[root] unknown key {unknown[0]!r} (allowed: {', '.join(sorted(allowed))})")
    kwargs = {name: _build(cls, name, raw.get(name)) for name, cls in SECTIONS.items()}
    if "output_dir" in raw:
        kwargs["output_dir"] = _coerce("root", "output_dir", "", raw["output_dir"])
    if "seed" in raw:
        kwargs["seed"] = _coerce("root", "seed", 0, raw["seed"])
    return ExperimentConfig(**kwargs)


def load(path) -> ExperimentConfig:
    """Read a YAML or JSON config (JSON is valid YAML, so one parser serves both)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return from_dict(raw)
