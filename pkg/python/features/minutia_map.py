#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Minutia maps and the attention masks derived from them.

A minutia map has one channel per reference angle 2*pi*k/C. Each minutia
adds a spatial Gaussian (on the map grid) weighted by a wrapped angular
Gaussian between its direction and the channel angle.
"""

import math
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage

from data.records import TWO_PI, Minutia, MinutiaSet
from errors import MinutiaRangeError, ParameterError


class MinutiaMap(BaseModel):
    """Nonnegative (channels, map_side, map_side) minutia encoding."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    scale: float = Field(default=0.5, gt=0, description="Map cells per input-image pixel")

    @field_validator("values")
    @classmethod
    def check_values(cls, values: np.ndarray) -> np.ndarray:
        if values.ndim != 3:
            raise ValueError(f"minutia map must be (channels, h, w), got {values.shape}")
        if values.size and values.min() < 0:
            raise ValueError("minutia map values must be nonnegative")
        return values

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])


class AttentionMask(BaseModel):
    """Spatial weights in [0, 1] summing to 1."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: np.ndarray

    @field_validator("weights")
    @classmethod
    def check_weights(cls, weights: np.ndarray) -> np.ndarray:
        if weights.ndim != 2:
            raise ValueError(f"attention mask must be 2-D, got {weights.shape}")
        if weights.min() < 0 or weights.max() > 1 or abs(weights.sum() - 1.0) > 1e-6:
            raise ValueError("attention mask entries must lie in [0, 1] and sum to 1")
        return weights


def wrapped_angle_difference(a, b):
    """Difference a - b wrapped into (-pi, pi]."""
    d = np.mod(np.asarray(a) - np.asarray(b) + math.pi, TWO_PI) - math.pi
    return np.where(d <= -math.pi, d + TWO_PI, d)


def build_minutia_map(minutiae: MinutiaSet, image_side: int, map_side: int = 128, channels: int = 6,
                      sigma_s: float = 4.0, sigma_a: float = math.pi / 6) -> MinutiaMap:
    """
    Encode minutiae as a (channels, map_side, map_side) map.

    Cell (i, j) is row i, column j; a minutia at image (x, y) sits at map
    position (y * scale, x * scale) with scale = map_side / image_side.

    Args:
        minutiae: Minutiae in input-image pixels.
        image_side: Side of the (square) input image.
        map_side: Side of the map; must divide image_side.
        channels: Number of reference angles.
        sigma_s: Spatial width in map cells.
        sigma_a: Angular width in radians.

    Returns:
        MinutiaMap: Sum of the per-minutia responses.

    Raises:
        ParameterError: On invalid sizes or widths.
        MinutiaRangeError: If a minutia lies outside the image.
    """
    if map_side < 1 or image_side < map_side or image_side % map_side != 0:
        raise ParameterError(f"map_side {map_side} must divide image_side {image_side}")
    if sigma_s <= 0 or sigma_a <= 0 or channels < 1:
        raise ParameterError("sigma_s and sigma_a must be positive and channels >= 1")

    scale = map_side / image_side
    values = np.zeros((channels, map_side, map_side), dtype=np.float64)
    grid = np.arange(map_side, dtype=np.float64)
    references = TWO_PI * np.arange(channels) / channels

    for m in minutiae:
        if not (0 <= m.x < image_side and 0 <= m.y < image_side):
            raise MinutiaRangeError(f"minutia ({m.x}, {m.y}) outside {image_side}x{image_side} image")
        gx = np.exp(-(grid - m.x * scale) ** 2 / (2 * sigma_s ** 2))
        gy = np.exp(-(grid - m.y * scale) ** 2 / (2 * sigma_s ** 2))
        ga = np.exp(-wrapped_angle_difference(m.theta, references) ** 2 / (2 * sigma_a ** 2))
        values += ga[:, None, None] * np.outer(gy, gx)[None]

    return MinutiaMap(values=values, scale=scale)


def build_minutia_map_batch(batch, image_side: int, map_side: int, channels: int,
                            sigma_s: float, sigma_a: float) -> np.ndarray:
    """Stack minutia maps of several MinutiaSets into (B, channels, map_side, map_side)."""
    return np.stack([build_minutia_map(m, image_side, map_side, channels, sigma_s, sigma_a).values
                     for m in batch])


def attention_mask_tensor(maps: torch.Tensor, target_shape: Tuple[int, int]) -> torch.Tensor:
    """
    Differentiable attention masks for a batch of maps.

    Args:
        maps: (B, C, H, W) nonnegative maps.
        target_shape: (H_L, W_L).

    Returns:
        torch.Tensor: (B, H_L, W_L) masks, each summing to 1; all-zero maps
        give the uniform mask.
    """
    h_l, w_l = target_shape
    if h_l < 1 or w_l < 1:
        raise ParameterError(f"target_shape must be >= 1 in both dimensions, got {target_shape}")
    collapsed = maps.amax(dim=1, keepdim=True)
    resized = F.interpolate(collapsed, size=(h_l, w_l), mode="bilinear", align_corners=False)
    resized = resized.clamp(min=0).squeeze(1)
    total = resized.sum(dim=(1, 2), keepdim=True)
    uniform = torch.full_like(resized, 1.0 / (h_l * w_l))
    empty = total <= 0
    return torch.where(empty, uniform, resized / torch.where(empty, torch.ones_like(total), total))


def attention_mask_from_map(minutia_map: Union[MinutiaMap, np.ndarray],
                            target_shape: Tuple[int, int]) -> AttentionMask:
    """Attention mask of one map: channel max, bilinear resize, clamp, sum-normalize."""
    values = minutia_map.values if isinstance(minutia_map, MinutiaMap) else np.asarray(minutia_map)
    tensor = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float64))[None]
    weights = attention_mask_tensor(tensor, tuple(target_shape))[0].numpy()
    return AttentionMask(weights=weights)


def extract_minutiae_from_map(minutia_map: MinutiaMap, threshold: float = 0.5) -> MinutiaSet:
    """
    Diagnostic peak picking: local maxima of the channel-max map above threshold.

    Directions are the circular mean of the channel responses at the peak.
    Not used for matching.
    """
    values = minutia_map.values
    collapsed = values.max(axis=0)
    peaks = (collapsed == ndimage.maximum_filter(collapsed, size=3, mode="constant")) & (collapsed > threshold)
    references = TWO_PI * np.arange(values.shape[0]) / values.shape[0]
    found = []
    for i, j in zip(*np.nonzero(peaks)):
        response = values[:, i, j]
        theta = math.atan2(float(response @ np.sin(references)), float(response @ np.cos(references)))
        found.append(Minutia(x=j / minutia_map.scale, y=i / minutia_map.scale, theta=theta))
    return MinutiaSet(items=tuple(found))
