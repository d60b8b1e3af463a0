"""Experiment configuration: a single JSON file with CLI-flag overrides.

Unknown keys are rejected; numeric ranges are validated by the section
dataclasses at construction time.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .training import LossConfig, OptimizerConfig, TrainingError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    vocab: str | None = None
    embeddings: str | None = None
    checkpoint: str | None = None
    report: str | None = None


@dataclass(frozen=True)
class ModelDims:
    emb_dim: int = 32
    hidden_dim: int = 64
    embeddings_dim: int = 16  # for hash-random tables when no file is given

    def __post_init__(self):
        if min(self.emb_dim, self.hidden_dim, self.embeddings_dim) < 1:
            raise ConfigError("model dimensions must be positive")


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    beam_size: int = 3
    max_len: int = 16
    min_count: int = 1
    early_metric: str = "loss"
    patience: int = 5

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.beam_size < 1:
            raise ConfigError("invalid run config")
        if self.max_len < 1 or self.min_count < 1 or self.patience < 1:
            raise ConfigError("invalid run config")
        if self.early_metric not in ("loss", "bleu"):
            raise ConfigError("early_metric must be 'loss' or 'bleu'")


@dataclass(frozen=True)
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelDims = field(default_factory=ModelDims)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        sections = {"paths": PathsConfig, "model": ModelDims, "loss": LossConfig,
                    "optimizer": OptimizerConfig, "run": RunConfig}
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in sections.items():
            sub = data.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"section {name!r} must be an object")
            valid = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(sub) - valid
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kwargs[name] = section_cls(**sub)
            except (TrainingError, ValueError) as e:
                raise ConfigError(f"section {name!r}: {e}") from e
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(data)

    def with_overrides(self, overrides: list[str]) -> "ExperimentConfig":
        """Apply ``section.key=value`` overrides; values parse as JSON
        literals, falling back to plain strings."""
        data = self.to_dict()
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value: {item!r}")
            key, value = item.split("=", 1)
            section, name = key.split(".", 1)
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                parsed = value
            data.setdefault(section, {})[name] = parsed
        return ExperimentConfig.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def echo(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
