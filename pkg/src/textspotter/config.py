"""Configuration dataclasses and YAML loading with dotted-key overrides.

A config file mirrors :class:`Config`::

    model:
      dim: 64
      num_queries: 100
    train:
      iterations: 2000
      milestones: [1500, 1800]

Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data.charset import DEFAULT_CHARACTERS


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    points: int = 4
    ffn_dim: int = 256
    encoder_layers: int = 6
    decoder_layers: int = 6
    num_queries: int = 100
    max_len: int = 25
    backbone_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    stem_channels: int = 16
    recognition_rows: int = 4
    charset: str = DEFAULT_CHARACTERS
    use_taqi: bool = True
    use_vlc: bool = True


@dataclass
class LossWeights:
    classification: float = 2.0
    box_l1: float = 5.0
    box_giou: float = 2.0
    box: float = 1.0
    polygon: float = 1.0
    recognition: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    match_class: float = 2.0
    match_box_l1: float = 5.0
    match_box_giou: float = 2.0
    encoder: float = 1.0


@dataclass
class DenoisingConfig:
    enabled: bool = True
    groups: int = 3
    shift_ratio: float = 0.4
    scale_ratio: float = 0.4


@dataclass
class DataConfig:
    image_size: list[int] = field(default_factory=lambda: [256, 256])
    min_instances: int = 1
    max_instances: int = 5
    min_word_len: int = 2
    max_word_len: int = 8
    font_size: list[int] = field(default_factory=lambda: [18, 30])
    curve_probability: float = 0.5
    max_curvature: float = 0.35
    max_placement_tries: int = 50
    augment: bool = False
    full_scale_augment: bool = False
    # desk scale: the full-scale ranges (640..896 step 32, long side 1600) times 0.4
    resize_short: list[int] = field(default_factory=lambda: [256, 268, 281, 294, 307, 320, 332, 345, 358])
    resize_max_long: int = 640
    rotation_degrees: float = 45.0
    crop_probability: float = 0.5
    test_short: int = 320
    test_max_long: int = 730


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 1e-4
    weight_decay: float = 1e-4
    milestones: list[int] = field(default_factory=lambda: [1500, 1800])
    gamma: float = 0.1
    batch_size: int = 2
    clip_norm: float = 0.1
    seed: int = 0
    eval_every: int = 0
    log_every: int = 10
    score_threshold: float = 0.3
    num_threads: int = 1


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    denoising: DenoisingConfig = field(default_factory=DenoisingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "Config":
        m, t = self.model, self.train
        if m.dim % m.heads:
            raise ConfigError(f"model.dim={m.dim} must be divisible by model.heads={m.heads}")
        if m.max_len < 2:
            raise ConfigError("model.max_len must be at least 2")
        if len(m.backbone_channels) != 4:
            raise ConfigError("model.backbone_channels needs 4 entries")
        if any(b <= a for a, b in zip(t.milestones, t.milestones[1:])):
            raise ConfigError(f"train.milestones must be strictly increasing: {t.milestones}")
        if t.lr <= 0 or t.gamma <= 0:
            raise ConfigError("train.lr and train.gamma must be positive")
        if any(v < 0 for v in dataclasses.asdict(self.loss).values()):
            raise ConfigError("loss weights must be non-negative")
        d = self.denoising
        if not (0 <= d.shift_ratio < 1 and 0 <= d.scale_ratio < 1):
            raise ConfigError("denoising ratios must lie in [0, 1)")
        if self.data.max_word_len > m.max_len - 1:
            raise ConfigError("data.max_word_len must leave room for EOS within model.max_len")
        if not 1 <= self.data.min_instances <= self.data.max_instances:
            raise ConfigError("need 1 <= data.min_instances <= data.max_instances")
        if self.data.max_instances > m.num_queries:
            raise ConfigError("model.num_queries must cover data.max_instances")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return config_hash(self.to_dict())


def config_hash(data: dict[str, Any]) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _build(cls, data: dict[str, Any], prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, default, prefix + name)
    return cls(**kwargs)


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, str):
            # YAML 1.1 reads "3e-4" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{key} must be a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        if isinstance(default, int) and not float(value).is_integer():
            raise ConfigError(f"{key} must be an integer")
        return type(default)(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


def config_from_dict(data: dict[str, Any] | None) -> Config:
    return _build(Config, data or {}).validate()


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars/lists."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}".replace("\n", " ")) from exc
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)


def dump_config(config: Config) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
