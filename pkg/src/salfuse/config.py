"""Typed configuration with strict JSON round-trip.

Unknown keys are rejected rather than ignored: a silently dropped toggle in
an ablation config would invalidate the comparison it was meant to set up.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ValidationError

CIM_MODES = ("full", "concat_only", "enhance_only", "fuse_only", "no_propagation")
MFA_MODES = ("full", "off", "enhance_fusion", "concat")
NUM_LEVELS = 5


@dataclass
class ModelConfig:
    input_size: int = 64
    channels: list[int] = field(default_factory=lambda: [4, 8, 16, 32, 64])
    level_strides: list[int] = field(default_factory=lambda: [4, 4, 8, 16, 32])
    cim_mode: str = "full"
    cim_levels: int = 5
    mfa_mode: str = "full"
    specific_decoders: bool = True
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if len(self.channels) != NUM_LEVELS:
            raise ValidationError(f"channels must list {NUM_LEVELS} values, got {len(self.channels)}")
        if any(c <= 0 for c in self.channels):
            raise ValidationError(f"channels must be strictly positive: {self.channels}")
        if len(self.level_strides) != NUM_LEVELS:
            raise ValidationError(f"level_strides must list {NUM_LEVELS} values, got {len(self.level_strides)}")
        if any(s <= 0 for s in self.level_strides):
            raise ValidationError(f"level_strides must be positive: {self.level_strides}")
        if any(b < a for a, b in zip(self.level_strides, self.level_strides[1:])):
            raise ValidationError(f"level_strides must be non-decreasing: {self.level_strides}")
        if self.input_size <= 0:
            raise ValidationError(f"input_size must be positive, got {self.input_size}")
        for s in self.level_strides:
            if self.input_size % s:
                raise ValidationError(f"input_size {self.input_size} not divisible by stride {s}")
        # strides are realised by stacked stride-2 blocks and undone by
        # repeated 2x pooling, so each stride and each consecutive ratio must
        # be a power of two
        ratios = [self.level_strides[0]] + [b // a for a, b in zip(self.level_strides, self.level_strides[1:])]
        for prev, cur in zip(self.level_strides, self.level_strides[1:]):
            if cur % prev:
                raise ValidationError(f"stride {cur} not a multiple of its predecessor {prev}")
        for r in ratios:
            if r & (r - 1):
                raise ValidationError(f"stride ratios must be powers of two, got {ratios}")
        if self.cim_mode not in CIM_MODES:
            raise ValidationError(f"cim_mode must be one of {CIM_MODES}, got {self.cim_mode!r}")
        if self.cim_levels not in (1, 3, 5):
            raise ValidationError(f"cim_levels must be 1, 3 or 5, got {self.cim_levels}")
        if self.mfa_mode not in MFA_MODES:
            raise ValidationError(f"mfa_mode must be one of {MFA_MODES}, got {self.mfa_mode!r}")
        if self.seed < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")
        return self


@dataclass
class LossConfig:
    edge_weight_gain: float = 5.0
    edge_window: int = 15
    iou_smoothing: float = 1.0

    def validate(self) -> "LossConfig":
        if self.edge_window < 1 or self.edge_window % 2 == 0:
            raise ValidationError(f"edge_window must be odd and positive, got {self.edge_window}")
        if self.edge_weight_gain < 0:
            raise ValidationError(f"edge_weight_gain must be non-negative, got {self.edge_weight_gain}")
        if self.iou_smoothing <= 0:
            raise ValidationError(f"iou_smoothing must be positive, got {self.iou_smoothing}")
        return self


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    lr_decay_factor: float = 10.0
    lr_decay_every_epochs: int = 60
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8

    def validate(self) -> "OptimizerConfig":
        if self.kind != "adam":
            raise ValidationError(f"optimizer kind must be 'adam', got {self.kind!r}")
        if self.lr <= 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if self.lr_decay_factor < 1:
            raise ValidationError(f"lr_decay_factor must be >= 1, got {self.lr_decay_factor}")
        if self.lr_decay_every_epochs < 1:
            raise ValidationError(f"lr_decay_every_epochs must be >= 1, got {self.lr_decay_every_epochs}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValidationError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ValidationError(f"eps must be positive, got {self.eps}")
        return self


@dataclass
class AugmentConfig:
    hflip: bool = False
    rotate: bool = False
    border_clip: bool = False

    def validate(self) -> "AugmentConfig":
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 200
    batch_size: int = 4
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.loss.validate()
        self.optimizer.validate()
        self.augment.validate()
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")
        return self


def _from_dict(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ValidationError(f"{where}: expected an object, got {type(payload).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - set(fields))
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    nested = {"model": ModelConfig, "loss": LossConfig, "optimizer": OptimizerConfig, "augment": AugmentConfig}
    for key, value in payload.items():
        if key in nested and cls is RunConfig:
            kwargs[key] = _from_dict(nested[key], value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def model_config_from_dict(payload: dict) -> ModelConfig:
    return _from_dict(ModelConfig, payload, "model config").validate()


def run_config_from_dict(payload: dict) -> RunConfig:
    return _from_dict(RunConfig, payload, "run config").validate()


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ValidationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def load_model_config(path) -> ModelConfig:
    return model_config_from_dict(load_json(path))


def load_run_config(path) -> RunConfig:
    payload = load_json(path)
    return run_config_from_dict(payload)
