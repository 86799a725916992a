#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Domain records shared by the data, feature and training modules.
"""

import math
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

TWO_PI = 2.0 * math.pi

MinutiaKind = Literal["ending", "bifurcation", "unknown"]


def normalize_angle(theta: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    wrapped = math.fmod(theta, TWO_PI)
    if wrapped < 0:
        wrapped += TWO_PI
    # fmod of values just below 0 can land exactly on 2*pi after the shift
    if wrapped >= TWO_PI:
        wrapped = 0.0
    return wrapped


class FingerprintImage(BaseModel):
    """Grayscale fingerprint raster with identity labels, pixels in [0, 1]."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray = Field(description="2-D float array with values in [0, 1]")
    finger_id: int = Field(default=0, ge=0, description="Contiguous class label")
    impression_id: int = Field(default=0, description="Impression number within the finger")
    source_tag: str = Field(default="", description="Dataset or DB name")
    path: Optional[str] = Field(default=None, description="File the image was read from")

    @field_validator("pixels")
    @classmethod
    def check_pixels(cls, pixels: np.ndarray) -> np.ndarray:
        if pixels.ndim != 2:
            raise ValueError(f"pixels must be 2-D, got shape {pixels.shape}")
        if pixels.shape[0] < 32 or pixels.shape[1] < 32:
            raise ValueError(f"image must be at least 32x32, got {pixels.shape}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0 or not np.isfinite(pixels).all()):
            raise ValueError("pixel values must lie in [0, 1]")
        return pixels

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def with_pixels(self, pixels: np.ndarray) -> "FingerprintImage":
        """Return a copy carrying new pixels and the same labels."""
        return FingerprintImage(pixels=pixels, finger_id=self.finger_id,
                                impression_id=self.impression_id,
                                source_tag=self.source_tag, path=self.path)


class Minutia(BaseModel):
    """A ridge ending or bifurcation in image coordinates."""
    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    theta: float = Field(description="Direction in radians, normalized to [0, 2*pi)")
    kind: MinutiaKind = "unknown"

    @field_validator("theta")
    @classmethod
    def wrap_theta(cls, theta: float) -> float:
        return normalize_angle(theta)


class MinutiaSet(BaseModel):
    """Ordered minutiae of one image."""
    model_config = ConfigDict(frozen=True)

    items: Tuple[Minutia, ...] = ()
    image_ref: str = ""

    @model_validator(mode="after")
    def check_unique(self) -> "MinutiaSet":
        seen = set()
        for m in self.items:
            key = (m.x, m.y, m.theta)
            if key in seen:
                raise ValueError(f"duplicate minutia at ({m.x}, {m.y}, {m.theta})")
            seen.add(key)
        return self

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def as_array(self) -> np.ndarray:
        """Return an (N, 3) array of (x, y, theta)."""
        if not self.items:
            return np.zeros((0, 3), dtype=np.float64)
        return np.array([[m.x, m.y, m.theta] for m in self.items], dtype=np.float64)

    def check_bounds(self, width: float, height: float) -> None:
        """Raise MinutiaRangeError if any minutia lies outside a width x height frame."""
        from errors import MinutiaRangeError

        for m in self.items:
            if not (0 <= m.x < width and 0 <= m.y < height):
                raise MinutiaRangeError(
                    f"minutia ({m.x}, {m.y}) outside {width}x{height} frame of {self.image_ref!r}")


class SynthesisSpec(BaseModel):
    """Parameters of the synthetic fingerprint generator."""
    model_config = ConfigDict(extra="forbid")

    size: int = Field(default=256, description="Image side in pixels")
    frequency: float = Field(default=0.1, description="Mean ridge frequency in cycles per pixel")
    frequency_jitter: float = Field(default=0.01, ge=0, description="Per-finger spread of the ridge frequency")
    warp_amplitude: float = Field(default=0.35, ge=0, lt=1.5, description="Max bending of the ridge flow, radians")
    warp_period: float = Field(default=160.0, gt=0, description="Wavelength of the flow bending in pixels")
    core: bool = Field(default=True, description="Blend a loop-like core singularity into the flow")
    core_radius: float = Field(default=48.0, gt=0, description="Extent of the core region in pixels")
    minutia_count: int = Field(default=12, ge=0, description="Planted ridge endings and bifurcations")
    margin: int = Field(default=24, ge=0, description="Keep planted minutiae this far from the border")
    impression_id: int = Field(default=0, ge=0, description="Impression drawn for the finger; 0 is the master")
    impression_rotation: float = Field(default=0.15, ge=0, description="Max rigid rotation between impressions, rad")
    impression_shift: float = Field(default=6.0, ge=0, description="Max rigid shift between impressions, px")
    noise_sigma: float = Field(default=0.03, ge=0, description="Sensor noise of each impression")


class DatasetRecord(BaseModel):
    """One image of a dataset: a file or a generator seed."""
    model_config = ConfigDict(frozen=True)

    image_id: str
    finger_id: int = Field(ge=0)
    impression_id: int
    source_tag: str = ""
    path: Optional[str] = None
    seed: Optional[int] = None
    minutiae_path: Optional[str] = None
    original_label: str = ""

    @model_validator(mode="after")
    def check_resolvable(self) -> "DatasetRecord":
        if self.path is None and self.seed is None:
            raise ValueError(f"record {self.image_id} has neither a path nor a seed")
        return self


class DatasetIndex(BaseModel):
    """Immutable list of dataset records with contiguous class labels."""
    model_config = ConfigDict(frozen=True)

    records: Tuple[DatasetRecord, ...] = ()
    class_count: int = Field(default=0, ge=0)
    synthesis: Optional[SynthesisSpec] = None

    @model_validator(mode="after")
    def check_labels(self) -> "DatasetIndex":
        for record in self.records:
            if record.finger_id >= self.class_count:
                raise ValueError(
                    f"finger_id {record.finger_id} of {record.image_id} outside [0, {self.class_count})")
            if record.seed is not None and self.synthesis is None:
                raise ValueError(f"record {record.image_id} needs a synthesis spec")
        return self

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self) -> dict:
        return {r.image_id: r for r in self.records}

    def fingers(self) -> List[int]:
        return sorted({r.finger_id for r in self.records})
