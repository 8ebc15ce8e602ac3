"""Simulation configuration: nested YAML sections mapped onto dataclasses.

Unknown keys are rejected so that typos fail loudly instead of silently
running with defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from .agents import AgentConfig
from .env import WorldParams
from .federation import FedConfig

POLICIES = ("dqn", "frlq", "frl", "centralized", "lru", "lfu")


class ConfigError(ValueError):
    pass


@dataclass
class RunParams:
    policy: str = "frlq"
    seed: int = 0
    num_slots: int = 5000
    reward_mode: str = "realized"
    warmup_fraction: float = 0.2

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if self.reward_mode not in ("realized", "expected"):
            raise ConfigError(f"unknown reward_mode {self.reward_mode!r}")
        if self.num_slots < 1:
            raise ConfigError("num_slots must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")


@dataclass
class SimConfig:
    world: WorldParams = field(default_factory=WorldParams)
    agent: AgentConfig = field(default_factory=AgentConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    run: RunParams = field(default_factory=RunParams)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def replace(self, **sections) -> "SimConfig":
        """Copy with some fields of some sections changed: replace(run={'seed': 3})."""
        data = self.to_dict()
        for name, values in sections.items():
            if name not in data:
                raise ConfigError(f"unknown section {name!r}")
            data[name].update(values)
        return from_dict(data)


_SECTIONS = {"world": WorldParams, "agent": AgentConfig, "fed": FedConfig, "run": RunParams}


def _coerce(cls, name: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        default = getattr(cls(), k)
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"[{name}].{k} must be a boolean")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(v, float) and v.is_integer():
                v = int(v)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"[{name}].{k} must be an integer")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"[{name}].{k} must be a number")
            v = float(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}]: {e}") from e


def from_dict(data: Optional[dict]) -> SimConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    return SimConfig(**{name: _coerce(cls, name, data.get(name, {})) for name, cls in _SECTIONS.items()})


def load(path) -> SimConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return from_dict(data)


def packaged(name: str) -> Path:
    """Path of a config or schema file shipped with the package."""
    return Path(str(resources.files("fogcache") / "data" / name))
