"""JSON config files overriding the stage defaults.

A config file is an object with optional sections ``generator``, ``broker``,
``stream``, ``learner``, ``bench`` and ``stability``; keys inside a section are the field
names of the matching config dataclass.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .bench import PipelineConfig
from .datagen import GeneratorConfig
from .errors import ConfigError, StorageError
from .learner.model import TrainConfig
from .mlog import BrokerConfig
from .stability import StabilityConfig


@dataclass(frozen=True)
class BenchDefaults:
    records: int = 1_000_000
    strategy: str = "full"
    chunk_size: int = 500_000
    seed: int = 42


@dataclass(frozen=True)
class Settings:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    broker: BrokerConfig = field(default_factory=BrokerConfig)
    stream: PipelineConfig = field(default_factory=PipelineConfig)
    learner: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchDefaults = field(default_factory=BenchDefaults)
    stability: StabilityConfig = field(default_factory=StabilityConfig)

    def pipeline(self) -> PipelineConfig:
        return dataclasses.replace(self.stream, broker=self.broker)


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    coerced = {}
    for k, v in values.items():
        default = getattr(cls(), k) if k not in ("regimes",) else None
        coerced[k] = tuple(v) if isinstance(default, tuple) and isinstance(v, list) else v
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"bad value in {section!r}: {exc}") from exc


_SECTIONS = {
    "generator": GeneratorConfig,
    "broker": BrokerConfig,
    "stream": PipelineConfig,
    "learner": TrainConfig,
    "bench": BenchDefaults,
    "stability": StabilityConfig,
}


def load_settings(path: str | Path | None) -> Settings:
    if path is None:
        return Settings()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "broker" in raw.get("stream", {}):
        raise ConfigError("broker settings belong in the 'broker' section")
    parts = {name: _build(cls, raw[name], name) for name, cls in _SECTIONS.items() if name in raw}
    return Settings(**parts)
