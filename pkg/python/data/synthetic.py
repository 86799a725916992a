#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Synthetic fingerprint generator.

Ridges are the cosine of a smooth phase field. Minutiae are planted as
spiral phase singularities (a +-1 twist of the phase around a point), which
adds or removes exactly one ridge there, so every recorded minutia is a real
ridge ending or fork in the image. Impressions of the same finger share the
phase field and differ by a small rigid motion and sensor noise.
"""

import math
import os
from typing import List, Tuple

import numpy as np

from data.records import (DatasetIndex, DatasetRecord, FingerprintImage, Minutia,
                          MinutiaSet, SynthesisSpec, normalize_angle)
from errors import InputDataError, ParameterError


class _RidgeField:
    """Analytic phase field of one finger, evaluated at arbitrary coordinates."""

    def __init__(self, seed: int, spec: SynthesisSpec):
        rng = np.random.default_rng([seed, 0])
        n = spec.size
        self.spec = spec
        self.frequency = max(spec.frequency + rng.uniform(-spec.frequency_jitter, spec.frequency_jitter),
                             0.25 * spec.frequency)
        self.beta = rng.uniform(0.0, math.pi)
        self.warp_axis = rng.uniform(0.0, math.pi)
        self.warp_offset = rng.uniform(0.0, 2 * math.pi)
        self.core_center = np.array([n / 2.0, n / 2.0]) + rng.uniform(-0.1 * n, 0.1 * n, size=2)
        self.minutiae = self._plant_minutiae(rng)

    def _plant_minutiae(self, rng: np.random.Generator) -> List[Tuple[float, float, int]]:
        spec = self.spec
        spacing = 2.0 / self.frequency
        low, high = spec.margin, spec.size - spec.margin
        if spec.minutia_count and high <= low:
            raise ParameterError(f"margin {spec.margin} leaves no room on a {spec.size} px image")

        planted: List[Tuple[float, float, int]] = []
        attempts = 0
        while len(planted) < spec.minutia_count:
            attempts += 1
            if attempts > 2000 * max(spec.minutia_count, 1):
                raise ParameterError(
                    f"cannot place {spec.minutia_count} minutiae {spacing:.1f} px apart on {spec.size} px")
            x, y = rng.uniform(low, high, size=2)
            if spec.core and math.hypot(x - self.core_center[0], y - self.core_center[1]) < spec.core_radius:
                continue
            if any(math.hypot(x - px, y - py) < spacing for px, py, _ in planted):
                continue
            planted.append((float(x), float(y), 1 if rng.random() < 0.5 else -1))
        return planted

    def flow_phase(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Phase of the parallel ridge flow with smooth bending."""
        spec = self.spec
        u = x * math.cos(self.beta) + y * math.sin(self.beta)
        v = -x * math.sin(self.beta) + y * math.cos(self.beta)
        omega = 2 * math.pi * self.frequency
        phase = omega * u
        if spec.warp_amplitude > 0:
            # d(warp)/dv = omega * tan(a) * cos(.), i.e. the flow bends by at most a
            k = 2 * math.pi / spec.warp_period
            phase = phase + omega * math.tan(spec.warp_amplitude) / k * np.sin(k * v + self.warp_offset)
        return phase

    def flow_gradient(self, x: float, y: float) -> Tuple[float, float]:
        """Analytic gradient of flow_phase at one point."""
        spec = self.spec
        omega = 2 * math.pi * self.frequency
        gu, gv = omega, 0.0
        if spec.warp_amplitude > 0:
            k = 2 * math.pi / spec.warp_period
            v = -x * math.sin(self.beta) + y * math.cos(self.beta)
            gv = omega * math.tan(spec.warp_amplitude) * math.cos(k * v + self.warp_offset)
        gx = gu * math.cos(self.beta) - gv * math.sin(self.beta)
        gy = gu * math.sin(self.beta) + gv * math.cos(self.beta)
        return gx, gy

    def intensity(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Ridge intensity in [0, 1] at the given coordinates."""
        phase = self.flow_phase(x, y)
        for mx, my, sign in self.minutiae:
            phase = phase + sign * np.arctan2(y - my, x - mx)
        ridges = np.cos(phase)
        if self.spec.core:
            r = np.hypot(x - self.core_center[0], y - self.core_center[1])
            weight = np.exp(-(r / self.spec.core_radius) ** 2)
            ridges = (1.0 - weight) * ridges + weight * np.cos(2 * math.pi * self.frequency * r)
        return 0.5 + 0.5 * ridges

    def minutia_records(self) -> List[Minutia]:
        records = []
        for mx, my, sign in self.minutiae:
            gx, gy = self.flow_gradient(mx, my)
            ridge_direction = math.atan2(gy, gx) + math.pi / 2
            theta = ridge_direction if sign > 0 else ridge_direction + math.pi
            kind = "ending" if sign > 0 else "bifurcation"
            records.append(Minutia(x=mx, y=my, theta=normalize_angle(theta), kind=kind))
        return records


def generate_synthetic_fingerprint(seed: int, spec: SynthesisSpec) -> Tuple[FingerprintImage, MinutiaSet]:
    """
    Generate one synthetic fingerprint impression and its minutiae.

    The finger (ridge pattern and planted minutiae) is fixed by ``seed``;
    ``spec.impression_id`` selects the impression. Impression 0 is the
    unmoved master; other impressions apply a rigid jitter.

    Args:
        seed: Finger seed.
        spec: Synthesis parameters.

    Returns:
        tuple: (FingerprintImage, MinutiaSet) with coordinates in the returned image.

    Raises:
        ParameterError: If size or frequency is not positive, or minutiae cannot be placed.
    """
    if spec.size <= 0 or spec.frequency <= 0:
        raise ParameterError(f"size and frequency must be positive, got {spec.size} and {spec.frequency}")
    if spec.size < 32:
        raise ParameterError(f"size must be at least 32 px, got {spec.size}")

    field = _RidgeField(seed, spec)
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    center = (n - 1) / 2.0

    rotation, shift = 0.0, np.zeros(2)
    if spec.impression_id > 0:
        jitter_rng = np.random.default_rng([seed, 1, spec.impression_id])
        rotation = jitter_rng.uniform(-spec.impression_rotation, spec.impression_rotation)
        shift = jitter_rng.uniform(-spec.impression_shift, spec.impression_shift, size=2)

    # output pixel q shows the master point R^-1 (q - c - t) + c
    cos_r, sin_r = math.cos(rotation), math.sin(rotation)
    qx, qy = xx - center - shift[0], yy - center - shift[1]
    src_x = cos_r * qx + sin_r * qy + center
    src_y = -sin_r * qx + cos_r * qy + center
    pixels = field.intensity(src_x, src_y)

    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng([seed, 2, spec.impression_id])
        pixels = pixels + noise_rng.normal(0.0, spec.noise_sigma, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0)

    moved = []
    for m in field.minutia_records():
        px, py = m.x - center, m.y - center
        x = cos_r * px - sin_r * py + center + shift[0]
        y = sin_r * px + cos_r * py + center + shift[1]
        if 0 <= x < n and 0 <= y < n:
            moved.append(Minutia(x=x, y=y, theta=m.theta + rotation, kind=m.kind))

    image_ref = f"synthetic/{seed}_{spec.impression_id}"
    image = FingerprintImage(pixels=pixels, impression_id=spec.impression_id,
                             source_tag="synthetic")
    return image, MinutiaSet(items=tuple(moved), image_ref=image_ref)


def synthetic_index(fingers: int, impressions: int, spec: SynthesisSpec, seed: int = 0) -> DatasetIndex:
    """
    Build a dataset index whose records are generator seeds.

    Args:
        fingers: Number of distinct fingers (classes).
        impressions: Impressions per finger, numbered from 0.
        spec: Synthesis parameters shared by all records.
        seed: Base seed; finger f uses seed + f.

    Returns:
        DatasetIndex: Records sorted by (finger_id, impression_id).
    """
    if fingers < 1 or impressions < 1:
        raise ParameterError("fingers and impressions must be >= 1")
    records = [
        DatasetRecord(image_id=f"synthetic/{finger:03d}_{impression}", finger_id=finger,
                      impression_id=impression, source_tag="synthetic", seed=seed + finger,
                      original_label=str(seed + finger))
        for finger in range(fingers) for impression in range(impressions)
    ]
    return DatasetIndex(records=tuple(records), class_count=fingers, synthesis=spec)


def write_synthetic_dataset(out_dir: str, count: int, impressions: int,
                            spec: SynthesisSpec, seed: int = 0) -> List[str]:
    """
    Write ``count`` synthetic images in the fvc layout with ``.min`` sidecars.

    Image k belongs to finger k // impressions and is written as
    ``NNN_I.png`` (1-based finger and impression numbers).

    Returns:
        list: Paths of the written images.
    """
    from data.loader import save_image, write_minutiae_file

    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise InputDataError(f"Cannot create {out_dir}: {e}")
    written = []
    for k in range(count):
        finger, impression = divmod(k, impressions)
        image, minutiae = generate_synthetic_fingerprint(
            seed + finger, spec.model_copy(update={"impression_id": impression}))
        stem = os.path.join(out_dir, f"{finger + 1:03d}_{impression + 1}")
        save_image(image, stem + ".png")
        write_minutiae_file(minutiae, stem + ".min")
        written.append(stem + ".png")
    return written

