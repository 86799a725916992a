#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for the embedding network: rotation, spectrum, pooling heads, shapes,
embedding assembly and gradients.
"""

import math

import numpy as np
import torch

from config import ModelConfig, TrainConfig
from data.preprocess import normalize_zero_mean, to_spectrum
from errors import ContractError, NumericalError
from model.network import (BranchOutputs, FingerprintEmbedder, MultiTaskModel, assemble_embedding,
                           extract_embeddings, forward, minutia_attention, rotate_bilinear,
                           spatial_softmax, spectrum_tensor, texture_head_gap, texture_head_mam)
from training.trainer import compute_losses

TINY = dict(input_side=32, stem_width=4, trunk_widths=[4, 8], branch_widths=[8, 8],
            frequency_widths=[4, 4, 4], localization_widths=[2, 2, 2], map_widths=[4, 4],
            feature_channels=8, embedding_dim=4, num_classes=3)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, **overrides})


def test_rotate_bilinear_examples():
    """Test zero rotation, half turns, a quarter turn of a single pixel and non-square input."""
    print("Testing rotate_bilinear...")
    rng = np.random.default_rng(0)
    image = rng.random((64, 64))
    assert np.array_equal(rotate_bilinear(image, 0.0), image)

    symmetric = image + image[::-1, ::-1]
    assert np.allclose(rotate_bilinear(symmetric, math.pi), symmetric, atol=1e-6)

    dot = np.zeros((256, 256))
    dot[128, 64] = 1.0
    turned = rotate_bilinear(dot, math.pi / 2)
    row, col = np.unravel_index(np.argmax(turned), turned.shape)
    assert abs(col - 128) <= 1 and abs(row - 192) <= 1, (row, col)

    for shape in ((32, 48), (1, 1, 48, 32)):
        try:
            rotate_bilinear(np.zeros(shape), 0.5)
            assert False, f"non-square {shape} accepted"
        except ContractError:
            pass


def test_rotate_round_trip_psnr():
    """Test that rotating forth and back keeps the interior of a smooth image."""
    print("Testing rotation round trip...")
    yy, xx = np.mgrid[0:256, 0:256].astype(np.float64)
    image = 0.5 + 0.25 * np.cos(2 * np.pi * xx / 32) + 0.25 * np.sin(2 * np.pi * (xx + yy) / 48)
    back = rotate_bilinear(rotate_bilinear(image, 0.3), -0.3)
    interior = np.hypot(xx - 127.5, yy - 127.5) < 80
    mse = np.mean((back[interior] - image[interior]) ** 2)
    assert 10 * math.log10(1.0 / mse) > 30


def test_rotate_quarter_turn_swaps_stripes():
    """Test that a quarter turn moves the stripe spectrum peak to the other axis."""
    print("Testing stripe rotation...")
    xx = np.tile(np.arange(64, dtype=np.float64), (64, 1))
    stripes = 0.5 + 0.5 * np.cos(2 * np.pi * 8 * xx / 64)
    turned = rotate_bilinear(stripes, math.pi / 2)
    for pixels, expected_axis in ((stripes, 1), (turned, 0)):
        power = np.abs(np.fft.fft2(pixels - pixels.mean()))
        u, v = np.unravel_index(np.argmax(power), power.shape)
        peak = (u, v)[expected_axis]
        assert peak in (8, 56) and (u, v)[1 - expected_axis] == 0


def test_spectrum_tensor_matches_preprocess():
    """Test the in-graph spectrum against the numpy crop."""
    print("Testing spectrum_tensor...")
    images = np.random.default_rng(1).random((2, 64, 64))
    in_graph = spectrum_tensor(torch.as_tensor(images[:, None]), 0.5).numpy()
    for i in range(2):
        expected = to_spectrum(normalize_zero_mean(images[i]), 0.5).as_array()
        assert np.allclose(in_graph[i], expected, atol=1e-9)


def test_texture_head_gap():
    """Test constant maps, selection weights and zero input."""
    print("Testing GAP texture head...")
    x_l = torch.zeros(3, 4, 4, dtype=torch.float64)
    x_l[1] = 2.0
    selector = torch.eye(3, dtype=torch.float64)[[1, 0]]
    assert torch.equal(texture_head_gap(x_l, selector), torch.tensor([2.0, 0.0], dtype=torch.float64))
    zeros = texture_head_gap(torch.zeros(2, 3, 4, 4), torch.randn(5, 3))
    assert torch.equal(zeros, torch.zeros(2, 5))


def test_minutia_attention_algebra():
    """Test uniform and one-hot masks and the reduction to GAP."""
    print("Testing minutia attention...")
    torch.manual_seed(0)
    uniform = torch.full((1, 8, 8), 1 / 64, dtype=torch.float64)
    for _ in range(50):
        y = spatial_softmax(torch.randn(1, 5, 8, 8, dtype=torch.float64))
        assert torch.allclose(y.sum(dim=(-2, -1)), torch.ones(1, 5, dtype=torch.float64))
        assert torch.allclose(minutia_attention(y, uniform), torch.full((1, 5), 1 / 64, dtype=torch.float64),
                              atol=1e-6)

    y = spatial_softmax(torch.randn(1, 5, 8, 8, dtype=torch.float64))
    one_hot = torch.zeros(1, 8, 8, dtype=torch.float64)
    one_hot[0, 3, 6] = 1.0
    assert torch.equal(minutia_attention(y, one_hot), y[:, :, 3, 6])

    x_l = torch.randn(2, 6, 8, 8, dtype=torch.float64)
    proj = torch.randn(5, 6, dtype=torch.float64)
    fc = torch.randn(4, 5, dtype=torch.float64)
    pooled = texture_head_mam(x_l, uniform.expand(2, 8, 8), proj, fc)
    projected = spatial_softmax(torch.einsum("kc,bchw->bkhw", proj, x_l))
    assert torch.allclose(pooled, texture_head_gap(projected, fc), atol=1e-12)


def test_mam_gradient_finite_difference():
    """Test the analytic gradient of the attention-pooled feature against central differences."""
    print("Testing attention pooling gradient...")
    torch.manual_seed(1)
    x_l = torch.randn(1, 6, 4, 4, dtype=torch.float64, requires_grad=True)
    mask = torch.softmax(torch.randn(1, 16, dtype=torch.float64), dim=1).view(1, 4, 4)
    proj = torch.randn(5, 6, dtype=torch.float64)
    fc = torch.randn(3, 5, dtype=torch.float64)
    texture_head_mam(x_l, mask, proj, fc).sum().backward()
    h = 1e-6
    for index in [(0, 0, 0, 0), (0, 3, 2, 1), (0, 5, 3, 3)]:
        with torch.no_grad():
            plus, minus = x_l.detach().clone(), x_l.detach().clone()
            plus[index] += h
            minus[index] -= h
            numeric = (texture_head_mam(plus, mask, proj, fc).sum()
                       - texture_head_mam(minus, mask, proj, fc).sum()) / (2 * h)
        analytic = x_l.grad[index]
        assert abs(float(analytic - numeric)) <= 1e-4 * max(abs(float(numeric)), 1e-3)


def test_zero_initialized_stn_is_identity():
    """Test that the untrained localization net leaves images untouched."""
    print("Testing zero-initialized STN...")
    torch.manual_seed(2)
    embedder = FingerprintEmbedder(tiny_config())
    embedder.eval()
    images = torch.rand(3, 1, 32, 32)
    with torch.no_grad():
        aligned, theta = embedder.stn_align(images)
    assert torch.equal(theta, torch.zeros(3))
    assert torch.equal(aligned, images)


def test_forward_shapes_and_determinism():
    """Test branch shapes with and without the frequency branch, and repeatable inference."""
    print("Testing forward shapes...")
    torch.manual_seed(3)
    config = tiny_config()
    embedder = FingerprintEmbedder(config)
    images = torch.rand(2, 1, 32, 32)
    outputs = forward(embedder, images, mode="infer")
    assert outputs.t_tex.shape == (2, 4) and outputs.t_min.shape == (2, 4) and outputs.t_freq.shape == (2, 4)
    assert outputs.h_e.shape == (2, 6, 16, 16)
    assert outputs.x_l.shape == (2, 8, 2, 2)
    assert outputs.attention.shape == (2, 2, 2)
    assert torch.all(outputs.h_e >= 0)
    again = forward(embedder, images, mode="infer")
    assert torch.equal(outputs.t_tex, again.t_tex) and torch.equal(outputs.t_freq, again.t_freq)

    no_frequency = FingerprintEmbedder(tiny_config(use_frequency=False, use_mam=False))
    outputs = forward(no_frequency, images, mode="train")
    assert outputs.t_freq is None and outputs.attention is None
    assert set(outputs.features()) == {"texture", "minutia"}

    try:
        embedder(torch.rand(2, 1, 48, 48))
        assert False, "wrong input size accepted"
    except ContractError:
        pass


def test_default_shapes():
    """Test the full-size branch and map shapes on a 256 px input."""
    print("Testing default network shapes...")
    torch.manual_seed(4)
    config = ModelConfig(num_classes=10)
    embedder = FingerprintEmbedder(config)
    outputs = forward(embedder, torch.rand(1, 1, 256, 256), mode="infer")
    for feature in outputs.features().values():
        assert feature.shape == (1, 512)
    assert outputs.h_e.shape == (1, 6, 128, 128)
    assert config.embedding_size == 1536


def test_assemble_embedding():
    """Test unit-norm concatenation and the zero-branch error."""
    print("Testing embedding assembly...")
    config = tiny_config()
    e1 = torch.zeros(1, 4)
    e1[0, 0] = 1.0
    outputs = BranchOutputs(t_tex=e1, t_min=3 * e1, t_freq=0.5 * e1, h_e=torch.zeros(1), theta_hat=torch.zeros(1),
                            x_l=torch.zeros(1), aligned=torch.zeros(1))
    embedding = assemble_embedding(outputs, config)[0]
    assert abs(np.linalg.norm(embedding.vector) - 1.0) < 1e-12
    for block in np.split(embedding.vector, 3):
        assert abs(np.linalg.norm(block) - 1 / math.sqrt(3)) < 1e-6
    assert abs(embedding.norm - math.sqrt(3)) < 1e-6

    broken = BranchOutputs(t_tex=e1, t_min=torch.zeros(1, 4), t_freq=e1, h_e=torch.zeros(1),
                           theta_hat=torch.zeros(1), x_l=torch.zeros(1), aligned=torch.zeros(1))
    try:
        assemble_embedding(broken, config)
        assert False, "zero-norm branch accepted"
    except NumericalError as e:
        assert e.branch == "minutia"


def test_extract_embeddings():
    """Test extraction dimensions, unit norms and batching independence."""
    print("Testing extract_embeddings...")
    torch.manual_seed(5)
    model = MultiTaskModel(tiny_config())
    images = [np.random.default_rng(i).random((32, 32)) for i in range(5)]
    vectors = extract_embeddings(model, images, batch_size=2)
    assert vectors.shape == (5, 12) and vectors.dtype == np.float64
    assert np.allclose(np.linalg.norm(vectors, axis=1), 1.0, atol=1e-6)
    assert np.allclose(extract_embeddings(model, images, batch_size=5), vectors, atol=1e-5)
    assert extract_embeddings(model, [], batch_size=2).shape == (0, 12)


def test_parameter_groups():
    """Test that STN and feature parameters partition the model."""
    print("Testing parameter groups...")
    model = MultiTaskModel(tiny_config())
    stn = {id(p) for p in model.stn_parameters()}
    features = {id(p) for p in model.feature_parameters()}
    assert stn and features and not stn & features
    assert stn | features == {id(p) for p in model.parameters()}
    assert id(model.embedder.localization.regressor.weight) in stn
    assert id(model.heads["texture"].weight) in features


def test_gradient_check():
    """Test analytic gradients of the full objective against central differences with step 1e-4.

    Every sampled entry agrees within 5% relative error and at least 90% within 0.1%.
    """
    print("Testing end-to-end gradients...")
    torch.manual_seed(6)
    config = tiny_config()
    model = MultiTaskModel(config).double()
    with torch.no_grad():
        model.embedder.localization.regressor.weight.normal_(std=0.05)
        model.embedder.localization.regressor.bias.fill_(0.03)
    model.eval()
    train_config = TrainConfig(rho=1.0, lambda_map=1.0)
    yy, xx = torch.meshgrid(torch.arange(32.0), torch.arange(32.0), indexing="ij")
    window = torch.exp(-((xx - 15.5) ** 2 + (yy - 15.5) ** 2) / (2 * 5.0 ** 2))
    # smooth, vanishing at the border: bilinear sampling kinks stay small
    images = torch.stack([0.5 * (1 + torch.cos(2 * math.pi * (xx + s * yy) / 32)) * window
                          for s in (0.5, -1.0)])[:, None].double()
    labels = torch.tensor([0, 2])
    h_g = torch.rand(2, 6, 16, 16, dtype=torch.float64) * 0.1

    def objective() -> torch.Tensor:
        outputs, logits = model(images, labels, h_g)
        return compute_losses(outputs, logits, labels, h_g, train_config)[0]

    model.zero_grad()
    objective().backward()
    groups = [model.embedder.localization.regressor.weight, model.embedder.localization.features[0][0].weight,
              model.embedder.mam_projection.weight, model.embedder.map_generator[2].weight,
              model.heads["texture"].weight, model.heads["minutia"].weight]
    rng = np.random.default_rng(7)
    h = 1e-4
    errors = []
    for parameter in groups:
        for flat in rng.choice(parameter.numel(), size=min(6, parameter.numel()), replace=False):
            analytic = float(parameter.grad.view(-1)[flat])
            with torch.no_grad():
                parameter.view(-1)[flat] += h
                plus = float(objective())
                parameter.view(-1)[flat] -= 2 * h
                minus = float(objective())
                parameter.view(-1)[flat] += h
            numeric = (plus - minus) / (2 * h)
            error = abs(analytic - numeric) / (max(abs(analytic), abs(numeric)) + 1e-6)
            assert error <= 5e-2, (parameter.shape, int(flat), analytic, numeric)
            errors.append(error)
    assert len(errors) >= 32
    # a ReLU or pooling switch inside [w - h, w + h] only touches a few entries
    assert np.mean(np.array(errors) <= 1e-3) >= 0.9, sorted(errors)[-5:]


def main():
    """Run all network tests."""
    tests = [
        test_rotate_bilinear_examples,
        test_rotate_round_trip_psnr,
        test_rotate_quarter_turn_swaps_stripes,
        test_spectrum_tensor_matches_preprocess,
        test_texture_head_gap,
        test_minutia_attention_algebra,
        test_mam_gradient_finite_difference,
        test_zero_initialized_stn_is_identity,
        test_forward_shapes_and_determinism,
        test_default_shapes,
        test_assemble_embedding,
        test_extract_embeddings,
        test_parameter_groups,
        test_gradient_check,
    ]
    for test in tests:
        test()
    print("\nAll network tests passed!")


if __name__ == "__main__":
    main()
