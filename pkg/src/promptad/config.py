"""Configuration tree for the full pipeline.

Every hyperparameter used anywhere in the package has a key here with its
documented default; YAML files override defaults field by field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError

KERNEL_SET_DEFAULT = ("3x3", "5x5", "7x7", "1x5", "5x1")

NORMAL_STATES_DEFAULT = ("flawless", "perfect", "normal")


@dataclass
class EncoderConfig:
    embed_dim: int = 64
    depth: int = 8
    heads: int = 4
    patch_size: int = 8
    tap_layers: tuple = (2, 4, 6, 8)
    vv_start_layer: int = 3
    mlp_ratio: int = 4
    init_std: float = 0.02


@dataclass
class TextEncoderConfig:
    width: int = 64
    depth: int = 4
    heads: int = 4
    max_len: int = 128
    init_std: float = 0.02


@dataclass
class PromptConfig:
    domain: str = "industrial"
    normal_states: tuple = NORMAL_STATES_DEFAULT
    abnormal_state: str = "damaged"
    n_prefix: int = 12
    learn_method: str = "cocoop"  # "coop" | "cocoop"
    include_class_name: bool = True
    template_mode: str = "both"  # "fixed" | "learnable" | "both"
    temperature: float = 100.0
    filtering: bool = True


@dataclass
class AdapterConfig:
    bottleneck_ratio: int = 4  # hidden width = embed_dim // ratio


@dataclass
class GroundingConfig:
    provider: str = "stub"  # "stub" | "file" | "none"
    confidence_threshold: float = 0.25
    suppression_lambda: float = 0.5
    enabled: bool = True
    position_enhancement: bool = True
    box_dir: str = ""  # sidecar directory for the file provider


@dataclass
class InteractionConfig:
    kernels: tuple = KERNEL_SET_DEFAULT
    deformable: bool = True
    logit_scale: float = 1.0


@dataclass
class FusionConfig:
    sigma: float = 4.0


@dataclass
class TrainConfig:
    epochs_phase1: int = 15
    epochs_phase2: int = 5
    lr_prompts: float = 1e-3
    lr_interaction: float = 1e-4
    lr_adapter: float = 1e-5
    batch_size: int = 1
    focal_gamma: float = 2.0
    weight_decay: float = 1e-2
    holdout_fraction: float = 0.2
    seed: int = 0

    def validate(self):
        for name in ("lr_prompts", "lr_interaction", "lr_adapter"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ConfigurationError("epoch counts must be >= 0")


@dataclass
class DatasetConfig:
    image_size: int = 64
    train_categories: tuple = ("plate", "band", "panel", "block")
    test_categories: tuple = ("disc", "washer")
    normal_per_category: int = 24
    abnormal_per_category: int = 24
    defect_types: tuple = ("scratch", "blob", "hole", "stain")


@dataclass
class Config:
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    text_encoder: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    grounding: GroundingConfig = field(default_factory=GroundingConfig)
    interaction: InteractionConfig = field(default_factory=InteractionConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def to_dict(self) -> dict:
        def convert(value):
            if dataclasses.is_dataclass(value):
                return {f.name: convert(getattr(value, f.name)) for f in dataclasses.fields(value)}
            if isinstance(value, tuple):
                return [convert(v) for v in value]
            return value

        return convert(self)

    def copy(self) -> "Config":
        return config_from_dict(self.to_dict())


def _fill_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigurationError(f"{path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name in known:
        if name not in data:
            continue
        value = data[name]
        if cls is Config and name in _SECTION_TYPES:
            kwargs[name] = _fill_dataclass(_SECTION_TYPES[name], value, f"{path}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "encoder": EncoderConfig,
    "text_encoder": TextEncoderConfig,
    "prompts": PromptConfig,
    "adapter": AdapterConfig,
    "grounding": GroundingConfig,
    "interaction": InteractionConfig,
    "fusion": FusionConfig,
    "training": TrainConfig,
    "dataset": DatasetConfig,
}


def config_from_dict(data: dict) -> Config:
    return _fill_dataclass(Config, data, "config")


def load_config(path: str | Path) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    return config_from_dict(data)


def save_config(cfg: Config, path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
