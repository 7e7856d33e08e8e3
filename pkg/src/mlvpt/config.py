"""Single JSON run configuration merging every component's settings."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from mlvpt.datagen import SynthConfig
from mlvpt.encoder import EncoderConfig
from mlvpt.heads import ASLConfig
from mlvpt.labelgraph import GroupingConfig
from mlvpt.trainer import PretrainConfig, TrainConfig

SEED_ENV = "MLVPT_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    expert_hidden: int = 5


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5


SECTIONS: dict[str, type] = {
    "grouping": GroupingConfig,
    "encoder": EncoderConfig,
    "model": ModelConfig,
    "synth": SynthConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "asl": ASLConfig,
    "eval": EvalConfig,
}

SEED_FIELDS = {"grouping": "rng_seed", "synth": "rng_seed", "pretrain": "seed", "train": "seed"}


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


@dataclass(frozen=True)
class RunConfig:
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    asl: ASLConfig = field(default_factory=ASLConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if self.grouping.n_groups != self.encoder.n_groups:
            raise ConfigError(
                f"grouping.n_groups={self.grouping.n_groups} differs from encoder.n_groups={self.encoder.n_groups}"
            )

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        seed = default_seed()
        kwargs = {}
        for name, typ in SECTIONS.items():
            section = dict(doc.get(name, {}))
            allowed = {f.name for f in fields(typ)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in '{name}': {sorted(bad)}")
            if name in SEED_FIELDS:
                section.setdefault(SEED_FIELDS[name], seed)
            try:
                kwargs[name] = typ(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid '{name}' section: {exc}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict[str, Any]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_section(self, name: str, **changes: Any) -> "RunConfig":
        return replace(self, **{name: replace(getattr(self, name), **changes)})
