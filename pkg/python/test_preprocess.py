#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for enhancement, resizing, zero-mean normalization and the spectrum crop.
"""

import os
import tempfile

import numpy as np

from data.loader import read_image_file, save_image
from data.preprocess import (ImagePreprocessor, enhance, local_normalize, normalize_zero_mean,
                             resample_square, resize_input, resize_minutiae, to_spectrum)
from data.records import FingerprintImage, Minutia, MinutiaSet, SynthesisSpec
from data.synthetic import generate_synthetic_fingerprint
from errors import ContractError, InputDataError, ParameterError


def test_enhance_none_and_local_normalize():
    """Test the identity method, constant images and checkerboards."""
    print("Testing enhancement...")
    rng = np.random.default_rng(0)
    image = FingerprintImage(pixels=rng.random((48, 40)))
    assert np.array_equal(enhance(image, "none").pixels, image.pixels)

    constant = enhance(FingerprintImage(pixels=np.full((64, 64), 0.3)), "local_normalize")
    assert np.all(constant.pixels == 0.5)

    checker = (np.indices((64, 64)).sum(axis=0) % 2).astype(np.float64)
    result = local_normalize(checker, block=16)
    assert result.min() == 0.0 and result.max() == 1.0

    try:
        enhance(image, "sharpen")
        assert False, "unknown method accepted"
    except ParameterError:
        pass


def test_enhance_external():
    """Test loading the pre-enhanced sibling file."""
    print("Testing external enhancement...")
    with tempfile.TemporaryDirectory() as tmp:
        raw_path = os.path.join(tmp, "a.png")
        save_image(FingerprintImage(pixels=np.full((32, 32), 0.2)), raw_path)
        save_image(FingerprintImage(pixels=np.full((32, 32), 0.8)), os.path.join(tmp, "a.enh.png"))
        enhanced = enhance(read_image_file(raw_path), "external")
        assert abs(enhanced.pixels.mean() - 0.8) < 1 / 255

        lonely = os.path.join(tmp, "b.png")
        save_image(FingerprintImage(pixels=np.full((32, 32), 0.2)), lonely)
        try:
            enhance(read_image_file(lonely), "external")
            assert False, "missing sibling accepted"
        except InputDataError:
            pass


def test_resize_input():
    """Test square resampling, identity, corners and non-square padding."""
    print("Testing resize_input...")
    rng = np.random.default_rng(1)
    big = FingerprintImage(pixels=rng.random((300, 300)))
    assert resize_input(big, 256).pixels.shape == (256, 256)

    exact = FingerprintImage(pixels=rng.random((256, 256)))
    assert np.array_equal(resize_input(exact, 256).pixels, exact.pixels)

    corners = resample_square(np.array([[0.0, 1.0], [1.0, 0.0]]), 4)
    assert np.allclose([corners[0, 0], corners[-1, -1]], 0.0, atol=1e-12)
    assert np.allclose([corners[0, -1], corners[-1, 0]], 1.0, atol=1e-12)

    wide = FingerprintImage(pixels=rng.random((200, 300)))
    resized = resize_input(wide, 256)
    assert resized.pixels.shape == (256, 256)
    assert 0.0 <= resized.pixels.min() and resized.pixels.max() <= 1.0

    minutiae = MinutiaSet(items=(Minutia(x=299.0, y=199.0, theta=0.0),))
    moved = resize_minutiae(minutiae, (200, 300), 256).items[0]
    assert abs(moved.x - 255.0) < 1e-9
    assert abs(moved.y - (199 + 50) * 255 / 299) < 1e-9

    try:
        resize_input(big, 16)
        assert False, "side below 32 accepted"
    except ParameterError:
        pass


def test_normalize_zero_mean():
    """Test the two worked examples and the zero-mean guarantee."""
    print("Testing normalize_zero_mean...")
    assert np.allclose(normalize_zero_mean(np.full((64, 64), 0.7)), 0.0, atol=1e-12)
    result = normalize_zero_mean(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.array_equal(result, np.array([[-0.5, 0.5], [0.5, -0.5]]))
    random_image = np.random.default_rng(2).random((256, 256))
    assert abs(normalize_zero_mean(random_image).mean()) < 1e-6


def test_spectrum_shape_and_dc():
    """Test the crop size, the DC bin and the all-zero input."""
    print("Testing spectrum shape...")
    x = normalize_zero_mean(np.random.default_rng(3).random((256, 256)))
    patch = to_spectrum(x, 0.5)
    assert patch.shape == (128, 128)
    assert abs(patch.real[64, 64]) < 1e-4 * 256 * 256
    assert abs(patch.imag[64, 64]) < 1e-4 * 256 * 256
    assert patch.as_array().shape == (2, 128, 128)

    zeros = to_spectrum(np.zeros((256, 256)))
    assert not zeros.real.any() and not zeros.imag.any()


def test_spectrum_cosine_peaks():
    """Test that horizontal cosines peak on the horizontal axis."""
    print("Testing spectrum peaks...")
    columns = np.arange(256)
    on_bin = np.tile(np.cos(2 * np.pi * 26 / 256 * columns), (256, 1))
    patch = to_spectrum(normalize_zero_mean(on_bin))
    magnitude = np.hypot(patch.real, patch.imag)
    peaks = {tuple(p) for p in np.argwhere(magnitude > 0.5 * magnitude.max())}
    assert peaks == {(64, 64 - 26), (64, 64 + 26)}
    assert np.max(np.abs(patch.imag)) < 1e-6 * magnitude.max()

    off_bin = np.tile(np.cos(2 * np.pi * 0.1 * columns), (256, 1))
    patch = to_spectrum(normalize_zero_mean(off_bin))
    row, col = np.unravel_index(np.argmax(np.hypot(patch.real, patch.imag)), patch.shape)
    assert row == 64 and abs(col - 64) == 26


def test_spectrum_linearity_and_symmetry():
    """Test linearity and conjugate symmetry of the crop."""
    print("Testing spectrum linearity and symmetry...")
    rng = np.random.default_rng(4)
    x = normalize_zero_mean(rng.random((128, 128)))
    y = normalize_zero_mean(rng.random((128, 128)))
    a, b = 1.7, -0.4
    combined = to_spectrum(a * x + b * y).as_array()
    expected = a * to_spectrum(x).as_array() + b * to_spectrum(y).as_array()
    assert np.allclose(combined, expected, rtol=1e-6, atol=1e-6 * np.abs(expected).max())

    patch = to_spectrum(x)
    real, imag = patch.real[1:, 1:], patch.imag[1:, 1:]
    assert np.allclose(real, real[::-1, ::-1], atol=1e-9)
    assert np.allclose(imag, -imag[::-1, ::-1], atol=1e-9)


def test_spectrum_band_energy():
    """Test that the half-band crop keeps most of the energy of ridges at 0.1 cycles/px."""
    print("Testing spectrum band energy...")
    image, _ = generate_synthetic_fingerprint(5, SynthesisSpec(noise_sigma=0.0))
    x = normalize_zero_mean(image)
    total = np.sum(np.abs(np.fft.fft2(x)) ** 2)
    patch = to_spectrum(x, 0.5)
    kept = np.sum(patch.real ** 2 + patch.imag ** 2)
    assert kept >= 0.95 * total, f"band keeps {kept / total:.3f} of the energy"


def test_spectrum_errors_and_mask():
    """Test crop-size and zero-mean checks, and the elliptical mask."""
    print("Testing spectrum errors...")
    try:
        to_spectrum(np.zeros((250, 250)), 0.5)
        assert False, "odd crop accepted"
    except ParameterError:
        pass
    try:
        to_spectrum(np.full((64, 64), 0.5))
        assert False, "non-zero mean accepted"
    except ContractError:
        pass

    x = normalize_zero_mean(np.random.default_rng(6).random((64, 64)))
    masked = to_spectrum(x, 0.5, elliptical_mask=True)
    assert masked.real[0, 0] == 0.0 and masked.imag[0, 0] == 0.0
    assert masked.real[16, 16] == to_spectrum(x, 0.5).real[16, 16]


def test_image_preprocessor():
    """Test the named operations and the conditioning chain."""
    print("Testing ImagePreprocessor...")
    preprocessor = ImagePreprocessor(side=64, method="local_normalize", block=16)
    rng = np.random.default_rng(7)
    image = FingerprintImage(pixels=rng.random((96, 128)), finger_id=3, impression_id=2)
    minutiae = MinutiaSet(items=(Minutia(x=127.0, y=95.0, theta=1.0),), image_ref="x")

    prepared, moved = preprocessor.prepare(image, minutiae)
    assert prepared.pixels.shape == (64, 64)
    assert prepared.finger_id == 3 and prepared.impression_id == 2
    assert len(moved) == 1 and moved.image_ref == "x"
    assert moved.items[0].x < 64 and moved.items[0].y < 64

    zero = preprocessor.execute_operation("zero_mean", prepared)
    assert abs(zero.mean()) < 1e-9
    patch = preprocessor.execute_operation("spectrum", prepared)
    assert patch.shape == (32, 32)
    try:
        preprocessor.execute_operation("blur", prepared)
        assert False, "unknown operation accepted"
    except ParameterError:
        pass


def main():
    """Run all preprocessing tests."""
    tests = [
        test_enhance_none_and_local_normalize,
        test_enhance_external,
        test_resize_input,
        test_normalize_zero_mean,
        test_spectrum_shape_and_dc,
        test_spectrum_cosine_peaks,
        test_spectrum_linearity_and_symmetry,
        test_spectrum_band_energy,
        test_spectrum_errors_and_mask,
        test_image_preprocessor,
    ]
    for test in tests:
        test()
    print("\nAll preprocessing tests passed!")


if __name__ == "__main__":
    main()
