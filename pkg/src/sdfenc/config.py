"""Run configuration: dataclasses for every pipeline stage plus strict
dict/JSON conversion (unknown keys are rejected)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .loss import LossWeights


@dataclass(frozen=True)
class SampleCounts:
    surface: int = 2048
    uniform: int = 2048
    near: int = 2048
    near_delta: float = 0.1

    def __post_init__(self):
        if min(self.surface, self.uniform, self.near) < 0:
            raise ValueError("sample counts must be nonnegative")
        if self.near_delta < 0:
            raise ValueError("near_delta must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 2
    iterations: int = 1000
    seed: int = 0
    noise_sigma: float = 0.0
    clip_norm: float = 10.0
    precision: str = "f64"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SampleCounts = field(default_factory=SampleCounts)


_SECTIONS = {
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "sampling": SampleCounts,
}


class ConfigError(ValueError):
    """Invalid run configuration document."""


def _section_from_dict(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    kwargs = dict(data)
    if section == "encoder" and "resolutions" in kwargs:
        kwargs["resolutions"] = tuple(kwargs["resolutions"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from exc


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config document must be an object, got {type(doc).__name__}")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {
        name: _section_from_dict(cls, doc.get(name, {}), name)
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(**parts)


def run_config_to_dict(cfg: RunConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["encoder"]["resolutions"] = list(doc["encoder"]["resolutions"])
    return doc
