"""Resolved run configuration: nested dataclasses, JSON files and dotted overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .encoder import EncoderConfig
from .errors import ConfigError, MissingFileError
from .losses import LossWeights
from .phantom import DatasetConfig
from .segmenter import FusionConfig
from .tracker import TrackerConfig


@dataclass
class TrainConfig:
    stage: str = "tracker"
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 1
    accumulation: int = 4
    epochs: int = 8
    seed: int = 0
    clip_frames: int = 8
    checkpoint_every: int = 1
    patience: int = 4
    min_delta: float = 1e-4
    grad_clip: float = 1.0
    schedule: str = "constant"
    deterministic: bool = True
    joint: bool = False
    max_train_clips: Optional[int] = None
    init_encoder_from_tracker: bool = True

    def validate(self):
        if self.stage not in ("tracker", "segmenter"):
            raise ConfigError(f"stage must be 'tracker' or 'segmenter', got {self.stage!r}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rate must be > 0 and weight decay >= 0")
        if self.batch_size < 1 or self.accumulation < 1:
            raise ConfigError("batch size and accumulation steps must be >= 1")
        if self.epochs < 0 or self.clip_frames < 1:
            raise ConfigError("epochs >= 0 and clip_frames >= 1 required")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError("schedule must be 'constant' or 'cosine'")


@dataclass
class MetricsConfig:
    thresholds: tuple = (1.0, 2.0, 4.0, 8.0, 16.0)


@dataclass
class Config:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def validate(self):
        self.encoder.validate()
        self.tracker.validate()
        self.fusion.validate()
        self.losses.validate(self.fusion.layers)
        self.train.validate()
        if len(self.losses.track_layers) not in (1, self.tracker.layers):
            raise ConfigError(f"{len(self.losses.track_layers)} track-layer weights for {self.tracker.layers} layers")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def valid_keys(cfg: Optional[Config] = None) -> list:
    cfg = cfg or Config()
    keys = []
    for section in dataclasses.fields(cfg):
        sub = getattr(cfg, section.name)
        keys += [f"{section.name}.{f.name}" for f in dataclasses.fields(sub)]
    return keys


def _coerce(current, value, key):
    if isinstance(value, str) and not isinstance(current, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            if current is None:
                return value
            raise ConfigError(f"cannot parse value {value!r} for {key}")
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigError(f"{key} expects a boolean, got {value!r}")
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, int) and not isinstance(current, bool) and isinstance(value, float):
        if value != int(value):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    return value


def set_key(cfg: Config, key: str, value) -> None:
    parts = key.split(".")
    if len(parts) != 2 or not hasattr(cfg, parts[0]) or not hasattr(getattr(cfg, parts[0]), parts[1]):
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys(cfg))}")
    section = getattr(cfg, parts[0])
    setattr(section, parts[1], _coerce(getattr(section, parts[1]), value, key))


def from_dict(d: dict) -> Config:
    cfg = Config()
    for section, values in (d or {}).items():
        if not hasattr(cfg, section) or not isinstance(values, dict):
            raise ConfigError(f"unknown config section {section!r}; valid keys: {', '.join(valid_keys(cfg))}")
        for name, value in values.items():
            set_key(cfg, f"{section}.{name}", value)
    return cfg


def apply_overrides(cfg: Config, overrides) -> Config:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        set_key(cfg, key.strip(), value.strip())
    return cfg


def load_config(path=None, overrides=()) -> Config:
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"missing config file {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = from_dict(raw)
    else:
        cfg = Config()
    return apply_overrides(cfg, overrides).validate()
