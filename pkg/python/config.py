#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Configuration models for model, training, augmentation, data and evaluation.

A run is described by one JSON file with the sections ``model``, ``train``,
``augment``, ``data`` and ``eval``; any field can be overridden from the
command line with a dotted path (``--train.lr_features 0.0005``).
"""

import json
import math
import os
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from data.records import SynthesisSpec


def _check_widths(value: Sequence[int]) -> Sequence[int]:
    if len(value) == 0 or any(w < 1 for w in value):
        raise ValueError("all widths must be >= 1")
    return value


def _check_range(value: Tuple[float, float]) -> Tuple[float, float]:
    if value[0] > value[1]:
        raise ValueError(f"range must be ordered, got {value}")
    return value


class ModelConfig(BaseModel):
    """Network shape and switches."""
    model_config = ConfigDict(extra="forbid")

    input_side: int = Field(default=256, description="Side of the square network input in pixels")
    stem_width: int = Field(default=32, description="Channels of the trunk stem convolution")
    trunk_widths: List[int] = Field(default=[64, 128], description="Shared trunk residual stage widths")
    branch_widths: List[int] = Field(default=[256, 512], description="Texture/minutia branch residual stage widths")
    frequency_widths: List[int] = Field(default=[64, 128, 256], description="Frequency branch residual stage widths")
    localization_widths: List[int] = Field(default=[8, 16, 32], description="Localization network conv widths")
    map_widths: List[int] = Field(default=[64, 32], description="Minutia map generator up-block widths")
    feature_channels: int = Field(default=1024, description="C_L, channels of the final texture/minutia feature map")
    embedding_dim: int = Field(default=512, description="K, dimension of each branch feature")
    num_classes: int = Field(default=1000, description="C', number of training classes")
    map_channels: int = Field(default=6, description="Angle channels of the minutia map")
    sigma_s: float = Field(default=4.0, gt=0, description="Spatial Gaussian width of the minutia map, in map cells")
    sigma_a: float = Field(default=math.pi / 6, gt=0, description="Angular Gaussian width of the minutia map, in radians")
    band_fraction: float = Field(default=0.5, gt=0, le=1, description="Fraction of the spectrum kept by the band crop")
    elliptical_mask: bool = Field(default=False, description="Zero spectrum bins outside the inscribed ellipse")
    use_mam: bool = Field(default=True, description="Pool texture features with the minutia attention module")
    use_frequency: bool = Field(default=True, description="Enable the frequency branch")
    mask_source: Literal["estimated", "ground_truth"] = Field(
        default="estimated", description="Minutia map feeding the attention mask")
    rotation_bound: float = Field(default=math.pi, gt=0, le=math.pi, description="Bound of the STN rotation in radians")
    head: Literal["adacos", "fixed_cosine", "softmax"] = Field(
        default="adacos", description="Classification head used during training")
    fixed_scale: Optional[float] = Field(default=None, gt=0, description="Scale of the fixed_cosine head")

    @field_validator("trunk_widths", "branch_widths", "frequency_widths", "localization_widths", "map_widths")
    @classmethod
    def check_widths(cls, value: List[int]) -> List[int]:
        return _check_widths(value)

    @model_validator(mode="after")
    def check_shapes(self) -> "ModelConfig":
        if self.input_side < 32 or self.input_side % 16 != 0:
            raise ValueError(f"input_side must be >= 32 and divisible by 16, got {self.input_side}")
        if self.stem_width < 1 or self.feature_channels < 1 or self.embedding_dim < 1:
            raise ValueError("stem_width, feature_channels and embedding_dim must be >= 1")
        if self.embedding_dim > self.feature_channels:
            raise ValueError("embedding_dim (K) must not exceed feature_channels (C_L)")
        if self.use_mam and self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 when use_mam is set")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.trunk_widths) != 2 or len(self.branch_widths) != 2 or len(self.map_widths) != 2:
            raise ValueError("trunk_widths, branch_widths and map_widths take exactly two stages")
        if len(self.frequency_widths) != 3 or len(self.localization_widths) != 3:
            raise ValueError("frequency_widths and localization_widths take exactly three stages")
        band = self.band_fraction * self.input_side
        if abs(band - round(band)) > 1e-9 or round(band) % 2 != 0:
            raise ValueError(f"band_fraction * input_side must be an even integer, got {band}")
        if self.head == "fixed_cosine" and self.fixed_scale is None:
            raise ValueError("fixed_cosine head needs fixed_scale")
        return self

    @property
    def map_side(self) -> int:
        return self.input_side // 2

    @property
    def feature_side(self) -> int:
        return self.input_side // 16

    @property
    def band_side(self) -> int:
        return int(round(self.band_fraction * self.input_side))

    @property
    def embedding_size(self) -> int:
        return self.embedding_dim * (3 if self.use_frequency else 2)


class TrainConfig(BaseModel):
    """Optimization protocol and ablation switches."""
    model_config = ConfigDict(extra="forbid")

    optimizer: Literal["rmsprop"] = Field(default="rmsprop", description="Optimizer")
    lr_features: float = Field(default=1e-3, gt=0, description="Learning rate of everything except the STN")
    lr_stn: float = Field(default=5e-4, gt=0, description="Learning rate of the STN localization network")
    weight_decay: float = Field(default=1e-5, ge=0, description="Weight decay of both parameter groups")
    lambda_map: float = Field(default=10.0, ge=0, description="Weight of the minutia map loss")
    rho: float = Field(default=100.0, gt=0, description="Constant factor of the minutia map loss")
    batch_size: int = Field(default=32, ge=2, description="Batch size (AdaCos needs a batch median)")
    epochs: int = Field(default=100, ge=1, description="Number of epochs")
    seed: int = Field(default=0, description="Global seed")
    use_frequency: bool = Field(default=True, description="Ablation: frequency branch")
    use_adacos: bool = Field(default=True, description="Ablation: AdaCos heads instead of plain softmax")
    use_augment: bool = Field(default=True, description="Ablation: fingerprint augmentations")
    use_mam: bool = Field(default=True, description="Ablation: minutia attention module")
    fixed_scale: Optional[float] = Field(default=None, gt=0, description="Freeze the cosine head scale")
    checkpoint_dir: str = Field(default="checkpoints", description="Directory for checkpoints and logs")
    strict_determinism: bool = Field(default=False, description="Serialize loading and force deterministic kernels")
    num_workers: int = Field(default=0, ge=0, description="Parallel data-loading workers")
    validate_eer: bool = Field(default=False, description="Compute validation EER every epoch")
    max_steps: Optional[int] = Field(default=None, ge=1, description="Stop after this many steps")

    def head_kind(self) -> str:
        if not self.use_adacos:
            return "softmax"
        return "fixed_cosine" if self.fixed_scale is not None else "adacos"


class AugmentConfig(BaseModel):
    """Fingerprint-specific augmentation parameters."""
    model_config = ConfigDict(extra="forbid")

    p_noise: float = Field(default=0.8, ge=0, le=1)
    p_contrast: float = Field(default=0.8, ge=0, le=1)
    p_deform: float = Field(default=0.5, ge=0, le=1)
    p_morph: float = Field(default=0.5, ge=0, le=1)
    noise_sigma_range: Tuple[float, float] = Field(default=(0.0, 0.08), description="Gaussian noise sigma")
    contrast_gamma_range: Tuple[float, float] = Field(default=(0.6, 1.6), description="Power-law exponent")
    contrast_gain_range: Tuple[float, float] = Field(default=(0.8, 1.2), description="Gain after the power law")
    morph_area_fraction_range: Tuple[float, float] = Field(
        default=(0.0002, 0.002), description="Patch size as a fraction of the image")
    morph_area_mode: Literal["area", "side"] = Field(
        default="area", description="Whether the fraction applies to area or to side length")
    morph_aspect_range: Tuple[float, float] = Field(default=(0.5, 2.0), description="Patch height/width ratio")
    deform_inner_radius: float = Field(default=40.0, gt=0, description="Radius of the undeformed core, px")
    deform_outer_radius: float = Field(default=110.0, gt=0, description="Radius beyond which motion is rigid, px")
    deform_max_displacement: float = Field(default=12.0, ge=0, description="Max rigid translation, px")
    deform_max_rotation: float = Field(default=0.17, ge=0, description="Max rigid rotation, radians")

    @field_validator("noise_sigma_range", "contrast_gamma_range", "contrast_gain_range",
                     "morph_area_fraction_range", "morph_aspect_range")
    @classmethod
    def check_ranges(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        return _check_range(value)

    @model_validator(mode="after")
    def check_radii(self) -> "AugmentConfig":
        if not 0 < self.deform_inner_radius < self.deform_outer_radius:
            raise ValueError("deformation radii must satisfy 0 < inner < outer")
        if self.noise_sigma_range[0] < 0 or self.contrast_gamma_range[0] <= 0:
            raise ValueError("noise sigma must be >= 0 and gamma > 0")
        return self


class DataConfig(BaseModel):
    """Dataset location and input conditioning."""
    model_config = ConfigDict(extra="forbid")

    root: Optional[str] = Field(default=None, description="Training dataset directory")
    layout: Literal["fvc", "molf", "flat"] = Field(default="fvc", description="Filename convention")
    eval_root: Optional[str] = Field(default=None, description="Verification dataset directory")
    eval_layout: Literal["fvc", "molf", "flat"] = Field(default="fvc")
    enhancement: Literal["none", "local_normalize", "external"] = Field(default="local_normalize")
    enhance_block: int = Field(default=16, ge=1, description="Block side of local normalization")
    impressions_for_val: int = Field(default=1, ge=0, description="Impressions per finger held out")
    synthetic: bool = Field(default=False, description="Train on generated fingerprints instead of root")
    synthetic_fingers: int = Field(default=10, ge=1)
    synthetic_impressions: int = Field(default=8, ge=1)
    synthesis: SynthesisSpec = Field(default_factory=SynthesisSpec)


class EvalConfig(BaseModel):
    """Verification protocol."""
    model_config = ConfigDict(extra="forbid")

    protocol: Literal["all_pairs", "fvc_standard"] = Field(default="all_pairs")
    batch_size: int = Field(default=16, ge=1, description="Batch size for embedding extraction")


class CliConfig(BaseModel):
    """Merged view of every section."""
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: str = Field(default="runs", description="Directory receiving all outputs")


def parse_override_value(text: str) -> Any:
    """Parse a command-line value as a JSON literal, falling back to a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[Tuple[str, str]]) -> Dict[str, Any]:
    """
    Apply dotted-path overrides to a raw configuration dictionary.

    Args:
        raw: Configuration as loaded from JSON.
        overrides: Pairs of (dotted path, textual value).

    Returns:
        dict: A new dictionary with the overrides applied.
    """
    result = json.loads(json.dumps(raw))
    for path, text in overrides:
        keys = path.split(".")
        node = result
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise KeyError(f"Cannot override {path}: {key} is not a section")
        node[keys[-1]] = parse_override_value(text)
    return result


def load_cli_config(path: Optional[str] = None,
                    overrides: Sequence[Tuple[str, str]] = ()) -> CliConfig:
    """
    Load and validate a run configuration.

    Args:
        path: JSON file, or None for defaults.
        overrides: Dotted-path overrides applied after loading.

    Returns:
        CliConfig: The validated configuration.

    Raises:
        InputDataError: If the file does not exist.
        pydantic.ValidationError: If any field violates its invariants.
    """
    from errors import InputDataError

    raw: Dict[str, Any] = {}
    if path is not None:
        if not os.path.exists(path):
            raise InputDataError(f"Config file not found: {path}")
        with open(path, "r") as f:
            raw = json.load(f)
    raw = apply_overrides(raw, overrides)
    return CliConfig.model_validate(raw)


def sync_ablation_flags(model: ModelConfig, train: TrainConfig) -> ModelConfig:
    """Push the training ablation switches into the model configuration."""
    return ModelConfig.model_validate({
        **model.model_dump(),
        "use_frequency": train.use_frequency,
        "use_mam": train.use_mam,
        "head": train.head_kind(),
        "fixed_scale": train.fixed_scale,
    })
