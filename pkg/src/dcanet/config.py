"""Experiment configuration: typed sections, strict JSON loading, dotted overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .structures import CASCADE_SCALES, PYRAMID_MODULES_PER_BRANCH, PYRAMID_SCALES

STRUCTURES = ("none", "crs", "cascade", "pyramid")
BACKBONES = ("toy", "resnet50", "resnet101")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration; ``path`` names the field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


@dataclass
class LossWeights:
    main: float = 1.0
    aux: float = 0.2
    sem: float = 0.05

    def __post_init__(self):
        for name in ("main", "aux", "sem"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(name, f"must be finite and >= 0, got {v}")


@dataclass
class ModelConfig:
    backbone: str = "toy"
    backbone_channels: tuple = (16, 32, 64, 128)
    structure: str = "cascade"
    width: int = 64
    schedule: tuple = CASCADE_SCALES
    branch_scales: tuple = PYRAMID_SCALES
    modules_per_branch: int = PYRAMID_MODULES_PER_BRANCH
    final_tap: str = "context"
    num_classes: int = 5
    semantic_supervision: bool = True
    semantic_width: int = 64
    aux_head: bool = True
    aux_width: int = 64
    crs_depth: int = len(CASCADE_SCALES)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError("backbone", f"must be one of {BACKBONES}, got {self.backbone!r}")
        if self.structure not in STRUCTURES:
            raise ConfigError("structure", f"must be one of {STRUCTURES}, got {self.structure!r}")
        if self.final_tap not in ("context", "spatial"):
            raise ConfigError("final_tap", f"must be 'context' or 'spatial', got {self.final_tap!r}")
        if len(self.backbone_channels) != 4:
            raise ConfigError("backbone_channels", "needs exactly 4 stage widths")
        for name in ("width", "num_classes", "modules_per_branch", "semantic_width", "aux_width", "crs_depth"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        for name in ("schedule", "branch_scales"):
            seq = getattr(self, name)
            if not seq or any(isinstance(r, bool) or not isinstance(r, int) or r < 1 for r in seq):
                raise ConfigError(name, f"must be a non-empty list of positive integers, got {seq!r}")


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    power: float = 0.9
    max_iter: int = 1000
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 0.0001
    seed: int = 0
    mirror: bool = True
    scale_range: tuple = (0.5, 2.0)
    rotation_range: tuple = (0.0, 0.0)
    blur: bool = False
    crop_size: int = 64
    class_balance: str = "median"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.power > 0:
            raise ConfigError("power", f"must be > 0, got {self.power}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", f"must be in [0, 1), got {self.momentum}")
        if not self.base_lr > 0:
            raise ConfigError("base_lr", f"must be > 0, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", f"must be >= 0, got {self.weight_decay}")
        lo, hi = self.scale_range
        if not 0.5 <= lo <= hi <= 2.0:
            raise ConfigError("scale_range", f"must lie within [0.5, 2.0], got {self.scale_range}")
        lo, hi = self.rotation_range
        if not -10.0 <= lo <= hi <= 10.0:
            raise ConfigError("rotation_range", f"must lie within [-10, 10], got {self.rotation_range}")
        for name in ("max_iter", "batch_size", "crop_size", "log_every"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", "must be >= 0")
        if self.class_balance not in ("median", "uniform"):
            raise ConfigError("class_balance", f"must be 'median' or 'uniform', got {self.class_balance!r}")


@dataclass
class SynthSpec:
    num_images: int = 200
    image_size: int = 64
    num_classes: int = 5
    min_shapes: int = 1
    max_shapes: int = 4
    scene_coherence: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("num_images", "image_size", "num_classes", "min_shapes", "max_shapes"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if self.min_shapes > self.max_shapes:
            raise ConfigError("min_shapes", "must not exceed max_shapes")
        if not 0.0 <= self.scene_coherence <= 1.0:
            raise ConfigError("scene_coherence", f"must lie in [0, 1], got {self.scene_coherence}")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "needs background plus at least one shape class")


@dataclass
class DataConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    num_val: int = 50
    path: Optional[str] = None


@dataclass
class EvalConfig:
    scales: tuple = (1.0,)
    save_predictions: bool = False

    def __post_init__(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError("scales", f"must be a non-empty list of positive scales, got {self.scales!r}")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.data.path is None and self.data.synth.num_classes != self.model.num_classes:
            raise ConfigError(
                "model.num_classes",
                f"{self.model.num_classes} does not match data.synth.num_classes {self.data.synth.num_classes}",
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("", f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
        return cls.from_dict(raw)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Return a copy with ``{"train.max_iter": 10, ...}`` dotted-path values applied."""
        d = self.to_dict()
        for dotted, value in overrides.items():
            keys = dotted.split(".")
            node = d
            for k in keys[:-1]:
                if not isinstance(node, dict) or k not in node:
                    raise ConfigError(dotted, "unknown configuration key")
                node = node[k]
            if not isinstance(node, dict) or keys[-1] not in node:
                raise ConfigError(dotted, "unknown configuration key")
            node[keys[-1]] = value
        return ExperimentConfig.from_dict(d)


def parse_override(text: str) -> tuple[str, object]:
    """Parse ``key.path=value``; the value is read as JSON when possible, else as a string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _build(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(path, f"expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, "unknown configuration key")
    kwargs = {}
    for name, value in d.items():
        hint = hints[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, sub)
        elif hint is tuple:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(sub, f"expected a list, got {value!r}")
            kwargs[name] = tuple(value)
        elif hint is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(sub, f"expected a number, got {value!r}")
            kwargs[name] = float(value)
        elif hint is bool:
            if not isinstance(value, bool):
                raise ConfigError(sub, f"expected true/false, got {value!r}")
            kwargs[name] = value
        elif hint is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(sub, f"expected an integer, got {value!r}")
            kwargs[name] = value
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError as e:
        if not path:
            raise
        raise ConfigError(f"{path}.{e.path}" if e.path else path, e.message) from e
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from e
