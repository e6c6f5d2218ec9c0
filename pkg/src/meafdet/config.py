"""Flat ``section.key = value`` run configuration.

Every field of the nested dataclasses below is addressable; missing keys keep
their defaults and unknown keys are rejected. Tuples are comma separated,
anchor lists use ``;`` between scales (``12;32;80``), booleans are
``true``/``false``.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthSpec
from .detector import MODALITIES, BackboneConfig, SrBranchConfig
from .losses import LossWeights

__all__ = ["TrainConfig", "FusionConfig", "RunConfig", "ConfigError", "parse_config", "serialize_config", "load_config"]


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 2
    max_steps: int = 0  # 0 = run all epochs
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    nesterov: bool = True
    seed: int = 0
    image_size: int = 96
    sr: bool = True
    modality: str = "fused"
    log_interval: int = 10
    conf: float = 0.25
    iou: float = 0.5
    nms_iou: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.image_size % 32:
            raise ConfigError("train.image_size must be divisible by 32")
        if self.modality not in MODALITIES:
            raise ConfigError(f"train.modality must be one of {MODALITIES}")
        if min(self.lr, self.momentum, self.weight_decay) < 0:
            raise ConfigError("optimizer hyperparameters must be non-negative")


@dataclass
class FusionConfig:
    mid_channels: int = 16
    reduction: int = 4

    def __post_init__(self):
        if self.mid_channels < 1 or (2 * self.mid_channels) % self.reduction:
            raise ConfigError("fusion.mid_channels must be >= 1 and 2*mid divisible by fusion.reduction")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sr: SrBranchConfig = field(default_factory=SrBranchConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    synth: SynthSpec = field(default_factory=SynthSpec)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ";".join(",".join(_fmt(v) for v in inner) for inner in value)
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if default and isinstance(default[0], tuple):
                return tuple(tuple(float(v) for v in part.split(",")) for part in text.split(";"))
            proto = default[0] if default else ""
            return tuple(_convert(v, proto, key) for v in text.split(",") if v.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section in dataclasses.fields(cfg):
        obj = getattr(cfg, section.name)
        for f in dataclasses.fields(obj):
            lines.append(f"{section.name}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    defaults = RunConfig()
    values: dict[str, dict[str, object]] = {f.name: {} for f in dataclasses.fields(defaults)}
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        items.append((key, val))
    items += list((overrides or {}).items())
    for key, val in items:
        section, _, name = key.partition(".")
        if section not in values:
            raise ConfigError(f"unknown config key {key!r}")
        proto = getattr(defaults, section)
        if name not in {f.name for f in dataclasses.fields(proto)}:
            raise ConfigError(f"unknown config key {key!r}")
        values[section][name] = _convert(str(val), getattr(proto, name), key)
    try:
        return RunConfig(**{s: type(getattr(defaults, s))(**v) for s, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None, overrides: dict[str, str] | None = None) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, overrides)
