#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for the training augmentations and their minutia co-transformation.
"""

import math

import numpy as np

from config import AugmentConfig
from data.augment import (apply_contrast, apply_deformation, augment_pipeline, augment_preview,
                          choose_morph_patch, config_for_side, deformation_field, draw_gates,
                          morph_area_bounds, random_contrast, random_morphology, random_noise, sample_rng)
from data.records import FingerprintImage, Minutia, MinutiaSet, SynthesisSpec
from data.synthetic import generate_synthetic_fingerprint
from errors import ParameterError

IDENTITY_DRAWS = AugmentConfig(
    p_noise=1.0, p_contrast=1.0, p_deform=1.0, p_morph=1.0,
    noise_sigma_range=(0.0, 0.0), contrast_gamma_range=(1.0, 1.0), contrast_gain_range=(1.0, 1.0),
    morph_area_fraction_range=(0.0, 0.0), deform_max_displacement=0.0, deform_max_rotation=0.0)


def test_contrast():
    """Test the identity draw and the gamma/gain example."""
    print("Testing contrast...")
    pixels = np.random.default_rng(0).random((64, 64))
    assert np.array_equal(apply_contrast(pixels, 1.0, 1.0), pixels)
    identity = random_contrast(pixels, np.random.default_rng(1), IDENTITY_DRAWS)
    assert np.array_equal(identity, pixels)
    assert np.allclose(apply_contrast(np.full((4, 4), 0.5), 2.0, 1.2), 0.3)
    assert apply_contrast(np.full((4, 4), 0.9), 1.0, 1.5).max() == 1.0


def test_noise():
    """Test zero sigma and the statistics of a fixed sigma."""
    print("Testing noise...")
    flat = np.full((256, 256), 0.5)
    assert np.array_equal(random_noise(flat, np.random.default_rng(2), IDENTITY_DRAWS), flat)
    fixed = AugmentConfig(noise_sigma_range=(0.05, 0.05))
    noisy = random_noise(flat, np.random.default_rng(3), fixed)
    assert abs(noisy.mean() - 0.5) < 0.002
    assert abs(noisy.std() - 0.05) < 0.005
    assert noisy.min() >= 0 and noisy.max() <= 1


def test_morphology():
    """Test patch bounds, locality and the dilation direction."""
    print("Testing morphology...")
    config = AugmentConfig()
    assert morph_area_bounds((256, 256), config) == (14, 131)
    rng = np.random.default_rng(4)
    for _ in range(200):
        top, left, h, w = choose_morph_patch((256, 256), rng, config)
        assert 14 <= h * w <= 131
        assert 0 <= top and top + h <= 256 and 0 <= left and left + w <= 256

    pixels = np.random.default_rng(5).random((256, 256))
    for seed in range(10):
        stream = np.random.default_rng(seed)
        top, left, h, w = choose_morph_patch(pixels.shape, stream, config)
        dilate = stream.random() < 0.5
        out = random_morphology(pixels, np.random.default_rng(seed), config)
        outside = np.ones(pixels.shape, dtype=bool)
        outside[top:top + h, left:left + w] = False
        assert np.array_equal(out[outside], pixels[outside])
        inside = (slice(top, top + h), slice(left, left + w))
        if dilate:
            assert np.all(out[inside] >= pixels[inside])
        else:
            assert np.all(out[inside] <= pixels[inside])


def test_deformation_field_regions():
    """Test the zero core, the raised-cosine blend and the rigid exterior."""
    print("Testing deformation field regions...")
    identity = deformation_field((256, 256), 40, 110)
    assert not identity.dx.any() and not identity.dy.any()

    field = deformation_field((256, 256), 40, 110, rotation=0.0, translation=(10.0, 0.0))
    cx, cy = field.center
    dx, dy = field.displacement(cx + 20, cy)
    assert float(dx) == 0.0 and float(dy) == 0.0
    dx, dy = field.displacement(cx + 75, cy)
    assert abs(float(dx) - 5.0) < 1e-9 and abs(float(dy)) < 1e-12
    dx, dy = field.displacement(cx, cy + 120)
    assert abs(float(dx) - 10.0) < 1e-12

    rotated = deformation_field((256, 256), 40, 110, rotation=0.1, translation=(0.0, 0.0))
    dx, dy = rotated.displacement(cx + 120, cy)
    assert abs(float(dx) - 120 * (math.cos(0.1) - 1)) < 1e-9
    assert abs(float(dy) - 120 * math.sin(0.1)) < 1e-9

    try:
        deformation_field((256, 256), 110, 40)
        assert False, "inner radius above outer accepted"
    except ParameterError:
        pass


def test_deformation_smoothness():
    """Test the bound on the difference between neighbouring displacements."""
    print("Testing deformation smoothness...")
    field = deformation_field((256, 256), 40, 110, translation=(10.0, 0.0))
    bound = 10.0 * math.pi / (110 - 40) + 1e-6
    assert np.max(np.abs(np.diff(field.dx, axis=0))) <= bound
    assert np.max(np.abs(np.diff(field.dx, axis=1))) <= bound


def test_apply_deformation_minutiae():
    """Test minutia motion in each region and the identity field."""
    print("Testing apply_deformation...")
    pixels = np.random.default_rng(6).random((256, 256))
    minutiae = MinutiaSet(items=(Minutia(x=140.0, y=130.0, theta=0.5), Minutia(x=250.0, y=127.5, theta=1.0),
                                 Minutia(x=5.0, y=127.5, theta=2.0)))
    identity = deformation_field((256, 256), 40, 110)
    same, kept = apply_deformation(pixels, minutiae, identity)
    assert np.array_equal(same, pixels)
    assert kept == minutiae

    field = deformation_field((256, 256), 40, 110, translation=(10.0, 0.0))
    _, moved = apply_deformation(pixels, minutiae, field)
    # the rightmost minutia leaves the frame
    assert len(moved) == 2
    inner, left = moved.items
    assert (inner.x, inner.y, inner.theta) == (140.0, 130.0, 0.5)
    assert abs(left.x - 15.0) < 0.5 and abs(left.y - 127.5) < 1e-9


def test_annotation_follows_image():
    """Test that a bright blob and its minutia move together."""
    print("Testing deformation consistency...")
    yy, xx = np.mgrid[0:256, 0:256].astype(np.float64)
    x0, y0 = 190.0, 140.0
    blob = np.exp(-((xx - x0) ** 2 + (yy - y0) ** 2) / (2 * 2.0 ** 2))
    field = deformation_field((256, 256), 40, 110, rotation=0.1, translation=(8.0, -5.0))
    warped, moved = apply_deformation(blob, MinutiaSet(items=(Minutia(x=x0, y=y0, theta=0.0),)), field)
    i, j = np.unravel_index(np.argmax(warped), warped.shape)
    m = moved.items[0]
    assert math.hypot(j - m.x, i - m.y) <= 2.0


def test_gate_rates():
    """Test the empirical Bernoulli rates of the default gates."""
    print("Testing gate rates...")
    config = AugmentConfig()
    rng = np.random.default_rng(7)
    counts = {"contrast": 0, "noise": 0, "deform": 0, "morph": 0}
    trials = 10000
    for _ in range(trials):
        for name, fired in draw_gates(config, rng).items():
            counts[name] += fired
    expected = {"contrast": 0.8, "noise": 0.8, "deform": 0.5, "morph": 0.5}
    for name, count in counts.items():
        assert abs(count / trials - expected[name]) < 0.02, f"{name} fired {count} times"


def test_pipeline_identities_and_determinism():
    """Test closed gates, identity draws, determinism and range."""
    print("Testing augment pipeline...")
    image, minutiae = generate_synthetic_fingerprint(1, SynthesisSpec())
    closed = AugmentConfig(p_noise=0, p_contrast=0, p_deform=0, p_morph=0)
    out, out_minutiae = augment_pipeline(image, minutiae, closed, np.random.default_rng(8))
    assert np.array_equal(out.pixels, image.pixels) and out_minutiae == minutiae

    out, out_minutiae = augment_pipeline(image, minutiae, IDENTITY_DRAWS, np.random.default_rng(9))
    assert np.array_equal(out.pixels, image.pixels) and out_minutiae == minutiae

    a, ma = augment_pipeline(image, minutiae, AugmentConfig(), sample_rng(3, 1, 17))
    b, mb = augment_pipeline(image, minutiae, AugmentConfig(), sample_rng(3, 1, 17))
    assert np.array_equal(a.pixels, b.pixels) and ma == mb
    assert a.pixels.shape == image.pixels.shape
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1
    assert a.finger_id == image.finger_id


def test_config_for_side():
    """Test scaling of the pixel-valued deformation parameters."""
    print("Testing config_for_side...")
    config = AugmentConfig()
    assert config_for_side(config, 256) is config
    small = config_for_side(config, 128)
    assert small.deform_inner_radius == 20.0 and small.deform_outer_radius == 55.0
    assert small.deform_max_displacement == 6.0
    assert small.deform_max_rotation == config.deform_max_rotation


def test_augment_preview():
    """Test the five named panels and their determinism."""
    print("Testing augment preview...")
    image, minutiae = generate_synthetic_fingerprint(2, SynthesisSpec())
    panels = augment_preview(image, minutiae, AugmentConfig(), seed=4)
    assert list(panels) == ["a_original", "b_contrast", "c_noise", "d_morphology", "e_deformation"]
    assert panels["a_original"][0] is image
    again = augment_preview(image, minutiae, AugmentConfig(), seed=4)
    for name in panels:
        assert np.array_equal(panels[name][0].pixels, again[name][0].pixels)
        assert isinstance(panels[name][0], FingerprintImage)


def main():
    """Run all augmentation tests."""
    tests = [
        test_contrast,
        test_noise,
        test_morphology,
        test_deformation_field_regions,
        test_deformation_smoothness,
        test_apply_deformation_minutiae,
        test_annotation_follows_image,
        test_gate_rates,
        test_pipeline_identities_and_determinism,
        test_config_for_side,
        test_augment_preview,
    ]
    for test in tests:
        test()
    print("\nAll augmentation tests passed!")


if __name__ == "__main__":
    main()
