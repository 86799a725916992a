#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Image preprocessing: enhancement, square resampling, zero-mean normalization
and the band-limited spectrum consumed by the frequency branch.
"""

import logging
import os
from typing import Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import fft as scipy_fft
from scipy import ndimage

from data.records import FingerprintImage, Minutia, MinutiaSet
from errors import ContractError, FingerprintToolkitError, InputDataError, ParameterError

logger = logging.getLogger(__name__)

EnhanceMethod = Literal["none", "local_normalize", "external"]
ArrayOrImage = Union[np.ndarray, FingerprintImage]


class SpectrumPatch(BaseModel):
    """Centered low-frequency crop of an image DFT. DC sits at (band_h // 2, band_w // 2)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    real: np.ndarray
    imag: np.ndarray
    origin: Literal["center"] = "center"

    @model_validator(mode="after")
    def check_shapes(self) -> "SpectrumPatch":
        if self.real.shape != self.imag.shape or self.real.ndim != 2:
            raise ValueError(f"real {self.real.shape} and imag {self.imag.shape} must be equal 2-D shapes")
        return self

    @property
    def shape(self) -> Tuple[int, int]:
        return self.real.shape

    def as_array(self) -> np.ndarray:
        """Stack into a (2, band_h, band_w) array, real first."""
        return np.stack([self.real, self.imag])


def _pixels(image: ArrayOrImage) -> np.ndarray:
    return image.pixels if isinstance(image, FingerprintImage) else np.asarray(image, dtype=np.float64)


def local_normalize(pixels: np.ndarray, block: int = 16) -> np.ndarray:
    """
    Per-block zero-mean unit-variance normalization remapped to [0, 1].

    Blocks with zero variance become 0 before the remap; an image whose
    normalized values are all equal maps to 0.5.
    """
    if block < 1:
        raise ParameterError(f"block must be >= 1, got {block}")
    pixels = np.asarray(pixels, dtype=np.float64)
    out = np.zeros_like(pixels)
    h, w = pixels.shape
    for top in range(0, h, block):
        for left in range(0, w, block):
            patch = pixels[top:top + block, left:left + block]
            std = patch.std()
            if std > 1e-12:
                out[top:top + block, left:left + block] = (patch - patch.mean()) / std
    low, high = out.min(), out.max()
    if high - low < 1e-12:
        return np.full_like(pixels, 0.5)
    return (out - low) / (high - low)


def _external_sibling(path: str) -> str:
    stem, ext = os.path.splitext(path)
    candidates = [stem + ".enh" + ext] + [f"{stem}.enh.{e}" for e in ("png", "tif", "bmp", "jpg", "pgm")]
    for candidate in candidates:
        if os.path.isfile(candidate):
            return candidate
    raise InputDataError(f"No pre-enhanced sibling for {path} (expected {stem}.enh{ext})")


def enhance(image: FingerprintImage, method: EnhanceMethod = "local_normalize",
            block: int = 16) -> FingerprintImage:
    """
    Enhance ridge contrast.

    Args:
        image: Input image.
        method: ``none`` returns the input unchanged, ``local_normalize``
            applies block-wise normalization, ``external`` loads the
            ``<basename>.enh.<ext>`` sibling written by an outside tool.
        block: Block side for ``local_normalize``.

    Returns:
        FingerprintImage: The enhanced image with the same labels.

    Raises:
        InputDataError: If ``external`` finds no sibling file.
    """
    if method == "none":
        return image
    if method == "local_normalize":
        return image.with_pixels(local_normalize(image.pixels, block))
    if method == "external":
        if image.path is None:
            raise InputDataError("External enhancement needs an image read from a file")
        from data.loader import read_image_file

        enhanced = read_image_file(_external_sibling(image.path))
        if enhanced.pixels.shape != image.pixels.shape:
            raise InputDataError(
                f"Enhanced sibling of {image.path} has shape {enhanced.pixels.shape}, expected {image.pixels.shape}")
        return image.with_pixels(enhanced.pixels)
    raise ParameterError(f"Unknown enhancement method: {method}")


def square_geometry(shape: Tuple[int, int], side: int) -> Tuple[int, int, float]:
    """
    Geometry of the pad-to-square then corner-aligned resample.

    Returns:
        tuple: (top, left, scale) so that an input point (x, y) lands at
        ((x + left) * scale, (y + top) * scale).
    """
    h, w = shape
    square = max(h, w)
    top, left = (square - h) // 2, (square - w) // 2
    scale = (side - 1) / (square - 1) if square > 1 else 1.0
    return top, left, scale


def resample_square(pixels: np.ndarray, side: int) -> np.ndarray:
    """
    Pad to a square with the border-mean intensity and resample bilinearly.

    Corner pixels of the padded square map onto corner pixels of the output.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    h, w = pixels.shape
    if h == w == side:
        return pixels.copy()
    top, left, _ = square_geometry((h, w), side)
    square = max(h, w)
    if h != w:
        border = np.concatenate([pixels[0], pixels[-1], pixels[1:-1, 0], pixels[1:-1, -1]])
        padded = np.full((square, square), border.mean())
        padded[top:top + h, left:left + w] = pixels
    else:
        padded = pixels
    resized = ndimage.zoom(padded, side / square, order=1, mode="nearest", grid_mode=False)
    return np.clip(resized, 0.0, 1.0)


def resize_input(image: FingerprintImage, side: int) -> FingerprintImage:
    """
    Resample an image to a ``side`` x ``side`` square.

    A square image already at ``side`` is returned unchanged.
    """
    if side < 32:
        raise ParameterError(f"side must be >= 32, got {side}")
    if image.height == image.width == side:
        return image
    return image.with_pixels(resample_square(image.pixels, side))


def resize_minutiae(minutiae: MinutiaSet, shape: Tuple[int, int], side: int) -> MinutiaSet:
    """Move minutiae through the same geometry as resize_input."""
    if shape == (side, side):
        return minutiae
    top, left, scale = square_geometry(shape, side)
    moved = []
    for m in minutiae:
        x, y = (m.x + left) * scale, (m.y + top) * scale
        if 0 <= x < side and 0 <= y < side:
            moved.append(Minutia(x=x, y=y, theta=m.theta, kind=m.kind))
    return MinutiaSet(items=tuple(moved), image_ref=minutiae.image_ref)


def normalize_zero_mean(image: ArrayOrImage) -> np.ndarray:
    """Subtract the mean intensity; the result has mean 0 within 1e-6."""
    pixels = _pixels(image)
    return pixels - pixels.mean()


def band_shape(shape: Tuple[int, int], band_fraction: float) -> Tuple[int, int]:
    """Crop size of the centered band, raising ParameterError unless both sides are even integers."""
    if not 0 < band_fraction <= 1:
        raise ParameterError(f"band_fraction must lie in (0, 1], got {band_fraction}")
    sides = []
    for n in shape:
        crop = band_fraction * n
        if abs(crop - round(crop)) > 1e-9 or int(round(crop)) % 2 != 0 or round(crop) < 2:
            raise ParameterError(f"band_fraction {band_fraction} of {n} px gives crop {crop}, need an even integer")
        sides.append(int(round(crop)))
    return sides[0], sides[1]


def elliptical_band_mask(band_h: int, band_w: int) -> np.ndarray:
    """Boolean mask of the ellipse inscribed in a centered crop."""
    v = (np.arange(band_h) - band_h // 2) / (band_h / 2.0)
    u = (np.arange(band_w) - band_w // 2) / (band_w / 2.0)
    return v[:, None] ** 2 + u[None, :] ** 2 <= 1.0


def to_spectrum(zero_mean: np.ndarray, band_fraction: float = 0.5,
                elliptical_mask: bool = False) -> SpectrumPatch:
    """
    Centered low-frequency crop of the 2-D DFT.

    Args:
        zero_mean: Zero-mean 2-D array.
        band_fraction: Fraction of each side kept around DC.
        elliptical_mask: Zero the bins outside the inscribed ellipse.

    Returns:
        SpectrumPatch: Real and imaginary parts, DC at the patch center.

    Raises:
        ContractError: If the input mean exceeds 1e-4 in magnitude.
        ParameterError: If the crop size is not an even integer.
    """
    data = np.asarray(zero_mean, dtype=np.float64)
    if data.ndim != 2:
        raise ContractError(f"expected a 2-D array, got shape {data.shape}")
    mean = data.mean()
    if abs(mean) > 1e-4:
        raise ContractError(f"spectrum input must be zero-mean, got mean {mean:.3g}")
    band_h, band_w = band_shape(data.shape, band_fraction)

    spectrum = scipy_fft.fftshift(scipy_fft.fft2(data))
    h, w = data.shape
    top, left = h // 2 - band_h // 2, w // 2 - band_w // 2
    patch = spectrum[top:top + band_h, left:left + band_w]
    if elliptical_mask:
        patch = np.where(elliptical_band_mask(band_h, band_w), patch, 0.0)
    return SpectrumPatch(real=np.ascontiguousarray(patch.real), imag=np.ascontiguousarray(patch.imag))


class ImagePreprocessor:
    """
    Named preprocessing operations plus the fixed conditioning chain
    (enhance, then resize) applied before the network.
    """

    def __init__(self, side: int = 256, method: EnhanceMethod = "local_normalize", block: int = 16,
                 band_fraction: float = 0.5, elliptical_mask: bool = False):
        self.side = side
        self.method = method
        self.block = block
        self.band_fraction = band_fraction
        self.elliptical_mask = elliptical_mask
        self.operations = {
            'enhance': self.enhance,
            'resize': self.resize,
            'zero_mean': self.zero_mean,
            'spectrum': self.spectrum,
        }

    def execute_operation(self, operation_type, image, **parameters):
        """
        Execute a named preprocessing operation.

        Args:
            operation_type (str): One of the keys of ``operations``.
            image: FingerprintImage or 2-D array.
            **parameters: Overrides of the preprocessor's defaults.

        Returns:
            The operation result.

        Raises:
            ParameterError: If the operation type is unknown or fails unexpectedly.
        """
        if operation_type not in self.operations:
            raise ParameterError(f"Unknown operation: {operation_type}")

        try:
            return self.operations[operation_type](image, **parameters)
        except FingerprintToolkitError:
            raise
        except Exception as e:
            logger.exception(f"Operation {operation_type} failed")
            raise ParameterError(f"Error executing operation {operation_type}: {str(e)}")

    def enhance(self, image: FingerprintImage, method: Optional[str] = None,
                block: Optional[int] = None) -> FingerprintImage:
        return enhance(image, method or self.method, block or self.block)

    def resize(self, image: FingerprintImage, side: Optional[int] = None) -> FingerprintImage:
        return resize_input(image, side or self.side)

    def zero_mean(self, image: ArrayOrImage) -> np.ndarray:
        return normalize_zero_mean(image)

    def spectrum(self, image: ArrayOrImage, band_fraction: Optional[float] = None) -> SpectrumPatch:
        return to_spectrum(normalize_zero_mean(image), band_fraction or self.band_fraction,
                           self.elliptical_mask)

    def prepare(self, image: FingerprintImage,
                minutiae: Optional[MinutiaSet] = None) -> Tuple[FingerprintImage, Optional[MinutiaSet]]:
        """Enhance and resize an image, carrying its minutiae along."""
        shape = image.pixels.shape
        prepared = self.resize(self.enhance(image))
        if minutiae is not None:
            minutiae = resize_minutiae(minutiae, shape, self.side)
        return prepared, minutiae
