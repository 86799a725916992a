#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Training-time fingerprint augmentations.

The pipeline applies, each behind its own Bernoulli gate and in this order:
contrast, noise, deformation, morphology. Only the deformation moves
minutiae; it maps them forward through the same field that warps the image.
"""

import logging
import math
from collections import OrderedDict
from typing import Dict, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from config import AugmentConfig
from data.records import FingerprintImage, Minutia, MinutiaSet
from errors import ContractError, ParameterError

logger = logging.getLogger(__name__)

ImageLike = Union[FingerprintImage, np.ndarray]
REFERENCE_SIDE = 256
GATE_ORDER = ("contrast", "noise", "deform", "morph")


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream for one sample of one epoch."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def config_for_side(config: AugmentConfig, side: int) -> AugmentConfig:
    """Scale the pixel-valued deformation parameters from 256 px to ``side``."""
    if side == REFERENCE_SIDE:
        return config
    factor = side / REFERENCE_SIDE
    return config.model_copy(update={
        "deform_inner_radius": config.deform_inner_radius * factor,
        "deform_outer_radius": config.deform_outer_radius * factor,
        "deform_max_displacement": config.deform_max_displacement * factor,
    })


def _split(image: ImageLike) -> np.ndarray:
    return image.pixels if isinstance(image, FingerprintImage) else np.asarray(image, dtype=np.float64)


def _join(image: ImageLike, pixels: np.ndarray) -> ImageLike:
    return image.with_pixels(pixels) if isinstance(image, FingerprintImage) else pixels


def apply_contrast(pixels: np.ndarray, gamma: float, gain: float) -> np.ndarray:
    """x -> clamp(gain * x ** gamma, 0, 1)."""
    if gamma == 1.0 and gain == 1.0:
        return pixels.copy()
    return np.clip(gain * np.power(pixels, gamma), 0.0, 1.0)


def random_contrast(image: ImageLike, rng: np.random.Generator,
                    config: Optional[AugmentConfig] = None) -> ImageLike:
    """Power-law contrast with gamma and gain drawn from the configured ranges."""
    config = config or AugmentConfig()
    gamma = rng.uniform(*config.contrast_gamma_range)
    gain = rng.uniform(*config.contrast_gain_range)
    return _join(image, apply_contrast(_split(image), gamma, gain))


def random_noise(image: ImageLike, rng: np.random.Generator,
                 config: Optional[AugmentConfig] = None) -> ImageLike:
    """Additive zero-mean Gaussian noise, sigma drawn from the configured range, clamped to [0, 1]."""
    config = config or AugmentConfig()
    pixels = _split(image)
    sigma = rng.uniform(*config.noise_sigma_range)
    noise = rng.normal(0.0, sigma, size=pixels.shape)
    if sigma == 0:
        return _join(image, pixels.copy())
    return _join(image, np.clip(pixels + noise, 0.0, 1.0))


def morph_area_bounds(shape: Tuple[int, int], config: AugmentConfig) -> Tuple[int, int]:
    """Smallest and largest allowed patch area in pixels."""
    area = shape[0] * shape[1]
    low, high = config.morph_area_fraction_range
    return int(math.ceil(low * area - 1e-9)), int(math.floor(high * area + 1e-9))


def choose_morph_patch(shape: Tuple[int, int], rng: np.random.Generator,
                       config: AugmentConfig) -> Tuple[int, int, int, int]:
    """
    Draw a rectangular patch for the morphology augmentation.

    Returns:
        tuple: (top, left, height, width); height * width is 0 only when the
        configured fraction range allows no pixel.
    """
    h_img, w_img = shape
    if config.morph_area_mode == "side":
        low, high = config.morph_area_fraction_range
        h = min(h_img, max(1, int(round(rng.uniform(low, high) * h_img))))
        w = min(w_img, max(1, int(round(rng.uniform(low, high) * w_img))))
    else:
        low, high = morph_area_bounds(shape, config)
        if high < 1:
            return 0, 0, 0, 0
        low = max(low, 1)
        target = int(rng.integers(low, high + 1))
        aspect = rng.uniform(*config.morph_aspect_range)
        w = min(max(1, int(round(math.sqrt(target / aspect)))), w_img)
        h = 0
        # shrink the width until some integer height lands inside [low, high]
        while w >= 1:
            h_low = max(1, math.ceil(low / w))
            h_high = min(h_img, high // w)
            if h_low <= h_high:
                h = int(min(max(round(target / w), h_low), h_high))
                break
            w -= 1
        if h == 0:
            raise ParameterError(f"no patch of area [{low}, {high}] fits a {h_img}x{w_img} image")
    top = int(rng.integers(0, h_img - h + 1))
    left = int(rng.integers(0, w_img - w + 1))
    return top, left, h, w


def random_morphology(image: ImageLike, rng: np.random.Generator,
                      config: Optional[AugmentConfig] = None) -> ImageLike:
    """3x3 grayscale dilation or erosion (equal odds) inside one random patch."""
    config = config or AugmentConfig()
    pixels = _split(image)
    top, left, h, w = choose_morph_patch(pixels.shape, rng, config)
    dilate = rng.random() < 0.5
    out = pixels.copy()
    if h * w == 0:
        return _join(image, out)
    filtered = (ndimage.grey_dilation if dilate else ndimage.grey_erosion)(pixels, size=(3, 3))
    out[top:top + h, left:left + w] = filtered[top:top + h, left:left + w]
    return _join(image, out)


class DeformationField(BaseModel):
    """
    Three-region displacement field: zero within inner_radius of the center,
    the rigid motion beyond outer_radius, raised-cosine blend in between.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dx: np.ndarray
    dy: np.ndarray
    center: Tuple[float, float]
    inner_radius: float = Field(gt=0)
    outer_radius: float = Field(gt=0)
    rotation: float = 0.0
    translation: Tuple[float, float] = (0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0 and self.translation == (0.0, 0.0)

    def weight(self, d: np.ndarray) -> np.ndarray:
        t = np.clip((d - self.inner_radius) / (self.outer_radius - self.inner_radius), 0.0, 1.0)
        return 0.5 * (1.0 - np.cos(math.pi * t))

    def displacement(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        """Analytic displacement at arbitrary (x, y)."""
        cx, cy = self.center
        px, py = np.asarray(x, dtype=np.float64) - cx, np.asarray(y, dtype=np.float64) - cy
        cos_r, sin_r = math.cos(self.rotation), math.sin(self.rotation)
        rigid_x = cos_r * px - sin_r * py - px + self.translation[0]
        rigid_y = sin_r * px + cos_r * py - py + self.translation[1]
        w = self.weight(np.hypot(px, py))
        return w * rigid_x, w * rigid_y


def deformation_field(image_shape: Tuple[int, int], inner_radius: float, outer_radius: float,
                      rotation: float = 0.0, translation: Tuple[float, float] = (0.0, 0.0),
                      center: Optional[Tuple[float, float]] = None) -> DeformationField:
    """Build a field from an explicit rigid motion about ``center`` (default: image center)."""
    if not 0 < inner_radius < outer_radius:
        raise ParameterError(f"need 0 < inner radius < outer radius, got {inner_radius} and {outer_radius}")
    h, w = image_shape
    if inner_radius >= min(h, w) / 2.0:
        raise ParameterError(f"inner radius {inner_radius} does not fit a {h}x{w} image")
    if center is None:
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
    field = DeformationField(dx=np.zeros(image_shape), dy=np.zeros(image_shape), center=tuple(center),
                             inner_radius=inner_radius, outer_radius=outer_radius,
                             rotation=float(rotation), translation=(float(translation[0]), float(translation[1])))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = field.displacement(xx, yy)
    return field.model_copy(update={"dx": dx, "dy": dy})


def make_deformation_field(image_shape: Tuple[int, int], rng: np.random.Generator,
                           params: Optional[AugmentConfig] = None) -> DeformationField:
    """Draw a rigid outer motion from the configured bounds and build its field."""
    params = params or AugmentConfig()
    rotation = rng.uniform(-params.deform_max_rotation, params.deform_max_rotation)
    translation = rng.uniform(-params.deform_max_displacement, params.deform_max_displacement, size=2)
    return deformation_field(image_shape, params.deform_inner_radius, params.deform_outer_radius,
                             rotation, (translation[0], translation[1]))


def apply_deformation(image: ImageLike, minutiae: Optional[MinutiaSet],
                      field: DeformationField, iterations: int = 12) -> Tuple[ImageLike, Optional[MinutiaSet]]:
    """
    Warp an image and its minutiae through a deformation field.

    A point p moves to p + D(p). The image is resampled bilinearly at the
    inverse map, found by fixed-point iteration p = q - D(p). Minutiae move
    forward, turn by the local rotation, and are dropped when they leave
    the frame.
    """
    pixels = _split(image)
    if field.dx.shape != pixels.shape:
        raise ContractError(f"field shape {field.dx.shape} does not match image shape {pixels.shape}")
    if field.is_identity:
        return _join(image, pixels.copy()), minutiae

    h, w = pixels.shape
    qy, qx = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = qx - field.dx, qy - field.dy
    for _ in range(iterations):
        dx, dy = field.displacement(px, py)
        px, py = qx - dx, qy - dy
    warped = ndimage.map_coordinates(pixels, [py, px], order=1, mode="nearest")
    warped = np.clip(warped, 0.0, 1.0)

    if minutiae is None:
        return _join(image, warped), None
    moved = []
    cx, cy = field.center
    for m in minutiae:
        dx, dy = field.displacement(m.x, m.y)
        x, y = m.x + float(dx), m.y + float(dy)
        if 0 <= x < w and 0 <= y < h:
            turn = field.rotation * float(field.weight(math.hypot(m.x - cx, m.y - cy)))
            moved.append(Minutia(x=x, y=y, theta=m.theta + turn, kind=m.kind))
    return _join(image, warped), MinutiaSet(items=tuple(moved), image_ref=minutiae.image_ref)


def draw_gates(config: AugmentConfig, rng: np.random.Generator) -> Dict[str, bool]:
    """Independent Bernoulli gates, drawn in pipeline order."""
    probabilities = {"contrast": config.p_contrast, "noise": config.p_noise,
                     "deform": config.p_deform, "morph": config.p_morph}
    return {name: bool(rng.random() < probabilities[name]) for name in GATE_ORDER}


def augment_pipeline(image: FingerprintImage, minutiae: MinutiaSet, config: AugmentConfig,
                     rng: np.random.Generator) -> Tuple[FingerprintImage, MinutiaSet]:
    """
    Apply the gated augmentations in the order contrast, noise, deformation, morphology.

    Args:
        image: Input image in [0, 1].
        minutiae: Its minutiae; only the deformation changes them.
        config: Probabilities and parameter ranges.
        rng: Random stream; the output is a pure function of the inputs and its state.

    Returns:
        tuple: (augmented image, co-transformed minutiae)
    """
    gates = draw_gates(config, rng)
    if gates["contrast"]:
        image = random_contrast(image, rng, config)
    if gates["noise"]:
        image = random_noise(image, rng, config)
    if gates["deform"]:
        field = make_deformation_field(image.pixels.shape, rng, config)
        image, minutiae = apply_deformation(image, minutiae, field)
    if gates["morph"]:
        image = random_morphology(image, rng, config)
    return image, minutiae


def augment_preview(image: FingerprintImage, minutiae: MinutiaSet, config: AugmentConfig,
                    seed: int) -> "OrderedDict[str, Tuple[FingerprintImage, MinutiaSet]]":
    """
    One panel per augmentation, each applied alone to the original.

    Returns:
        OrderedDict: Panels keyed ``a_original``, ``b_contrast``, ``c_noise``,
        ``d_morphology``, ``e_deformation``.
    """
    rng = np.random.default_rng(seed)
    panels = OrderedDict()
    panels["a_original"] = (image, minutiae)
    panels["b_contrast"] = (random_contrast(image, rng, config), minutiae)
    panels["c_noise"] = (random_noise(image, rng, config), minutiae)
    panels["d_morphology"] = (random_morphology(image, rng, config), minutiae)
    field = make_deformation_field(image.pixels.shape, rng, config)
    panels["e_deformation"] = apply_deformation(image, minutiae, field)
    return panels
