"""Flat ``key = value`` configuration files and the training presets.

Blank lines and ``#`` comments are ignored. Every key must name a field of the
target dataclass (or, for training configs, of the nested model config);
unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .assignment import LossWeights
from .model import InferenceConfig, ModelConfig
from .simulate import SimulationConfig

SCHEDULES = ("one-cycle", "constant")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    utterance_len: float = 300.0
    max_lr: float = 5e-5
    steps: int = 50_000
    schedule: str = "constant"
    warmup_frac: float = 0.3
    final_lr_ratio: float = 1e-3
    dropout_backbone: float = 0.1
    dropout_query: float = 0.0
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # max global grad norm; 0 disables
    label_smoothing: float = 0.1
    lambda_dia: float = 5.0
    lambda_dice: float = 5.0
    lambda_cls: float = 2.0
    seed: int = 0
    eval_every: int = 1000
    keep_best_k: int = 10
    frame_rate: int = 100
    class_threshold: float = 0.8
    mask_threshold: float = 0.5
    init_backbone: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        for name in ("batch_size", "eval_every", "keep_best_k", "frame_rate"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")
        if self.steps < 0 or self.utterance_len <= 0 or self.max_lr <= 0:
            raise ConfigError("steps must be >= 0; utterance_len and max_lr must be positive")
        # the model's dropout rates are owned by the training config
        self.model = dataclasses.replace(
            self.model, backbone_dropout=self.dropout_backbone, query_dropout=self.dropout_query
        )
        self.loss_weights.validate()

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_dia, self.lambda_dice, self.lambda_cls)

    @property
    def inference(self) -> InferenceConfig:
        return InferenceConfig(self.class_threshold, self.mask_threshold)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Pretraining, all-data finetuning and single-dataset finetuning settings.
PRESETS = {
    "pretrain": dict(
        batch_size=128 * 4,
        utterance_len=50.0,
        max_lr=1e-4,
        steps=500_000,
        schedule="one-cycle",
        dropout_backbone=0.1,
        dropout_query=0.0,
        weight_decay=0.0,
        label_smoothing=0.0,
    ),
    "finetune": dict(
        batch_size=32,
        utterance_len=300.0,
        max_lr=5e-5,
        steps=50_000,
        schedule="constant",
        dropout_backbone=0.1,
        dropout_query=0.0,
        weight_decay=0.0,
        label_smoothing=0.1,
    ),
    "finetune_single": dict(
        batch_size=8,
        utterance_len=600.0,
        max_lr=5e-6,
        steps=10_000,
        schedule="constant",
        dropout_backbone=0.1,
        dropout_query=0.0,
        weight_decay=0.0,
        label_smoothing=0.1,
    ),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


def _coerce(raw: str, kind, key: str):
    kind = {"int": int, "float": float, "str": str, "bool": bool, "dict": dict}.get(kind, kind)
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is dict:
            value = json.loads(raw)
            if not isinstance(value, dict):
                raise ValueError(raw)
            return value
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _field_types(cls) -> dict:
    return {f.name: f.type for f in dataclasses.fields(cls) if f.name != "model"}


def train_config_from_pairs(pairs: dict[str, str]) -> TrainConfig:
    base = {}
    if "preset" in pairs:
        pairs = dict(pairs)
        name = pairs.pop("preset")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
        base = dict(PRESETS[name])
    train_types = _field_types(TrainConfig)
    model_types = _field_types(ModelConfig)
    train_kw, model_kw = dict(base), {}
    for key, raw in pairs.items():
        if key in train_types:
            train_kw[key] = _coerce(raw, train_types[key], key)
        elif key in model_types:
            model_kw[key] = _coerce(raw, model_types[key], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return TrainConfig(model=ModelConfig(**model_kw), **train_kw)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def simulation_config_from_pairs(pairs: dict[str, str]) -> SimulationConfig:
    types = _field_types(SimulationConfig)
    kw = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kw[key] = _coerce(raw, types[key], key)
    try:
        return SimulationConfig(**kw)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def load_train_config(path) -> TrainConfig:
    return train_config_from_pairs(parse_pairs(Path(path).read_text(), str(path)))


def load_simulation_config(path) -> SimulationConfig:
    return simulation_config_from_pairs(parse_pairs(Path(path).read_text(), str(path)))
