#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for the minutia map loss, cosine heads with adaptive scale and the total loss.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import ValidationError

from errors import ContractError, NumericalError
from features.minutia_map import MinutiaMap
from model.losses import (AdaCosState, CosineHead, LossBreakdown, SoftmaxHead, adacos_probabilities,
                          cross_entropy_loss, initial_adacos_scale, make_head, minutia_map_loss,
                          total_loss, warning_counts)


def reference_scale_update(cosines, labels, scale):
    """Batch scale rule written out in numpy."""
    cosines = np.asarray(cosines, dtype=np.float64)
    others = np.exp(scale * cosines)
    others[np.arange(len(labels)), labels] = 0.0
    b_avg = others.sum(axis=1).mean()
    theta_med = np.median(np.arccos(cosines[np.arange(len(labels)), labels]))
    return math.log(b_avg) / math.cos(min(math.pi / 4, theta_med))


def test_minutia_map_loss():
    """Test the zero case, the single-cell example and shape checks."""
    print("Testing minutia map loss...")
    h_g = np.random.default_rng(0).random((6, 128, 128))
    assert minutia_map_loss(h_g, h_g.copy(), 100) == 0.0

    h_e = h_g.copy()
    h_e[2, 10, 20] += 0.1
    assert abs(minutia_map_loss(h_g, h_e, 100) - 1.0) < 1e-9

    try:
        minutia_map_loss(np.zeros((6, 128, 128)), np.zeros((6, 64, 64)))
        assert False, "shape mismatch accepted"
    except ContractError:
        pass

    batch_g = torch.zeros(2, 6, 8, 8, dtype=torch.float64)
    batch_e = torch.zeros(2, 6, 8, 8, dtype=torch.float64)
    batch_e[0, 0, 0, 0] = 1.0
    assert abs(float(minutia_map_loss(batch_g, batch_e, 1.0)) - 0.5) < 1e-12


def test_minutia_map_loss_input_kinds():
    """Test maps, arrays and tensors in any mix, and gradients through the tensor path."""
    print("Testing minutia map loss input kinds...")
    rng = np.random.default_rng(4)
    g, e = rng.random((6, 8, 8)), rng.random((6, 8, 8))
    expected = 100 * float(((g - e) ** 2).sum())
    assert abs(minutia_map_loss(MinutiaMap(values=g), MinutiaMap(values=e)) - expected) < 1e-9
    assert abs(minutia_map_loss(MinutiaMap(values=g), e) - expected) < 1e-9

    h_e = torch.tensor(e, requires_grad=True)
    loss = minutia_map_loss(MinutiaMap(values=g), h_e)
    assert isinstance(loss, torch.Tensor) and abs(float(loss) - expected) < 1e-9
    loss.backward()
    assert torch.allclose(h_e.grad, torch.as_tensor(200 * (e - g)))

    batch = minutia_map_loss(torch.tensor(g[None]), torch.tensor(e[None]))
    assert abs(float(batch) - expected) < 1e-9


def test_initial_scale():
    """Test the initial scale for large and tiny class counts."""
    print("Testing initial AdaCos scale...")
    assert abs(initial_adacos_scale(1000) - math.sqrt(2) * math.log(999)) < 1e-12
    assert initial_adacos_scale(2) > 0
    state = AdaCosState.initial(10, 4, seed=1)
    assert np.allclose(np.linalg.norm(state.class_weights, axis=1), 1.0)
    assert state.update_count == 0


def test_adacos_probabilities_eval():
    """Test the worked example and equal cosines in eval mode."""
    print("Testing AdaCos probabilities...")
    state = AdaCosState(class_weights=np.eye(3), scale=10.0)
    probabilities, after = adacos_probabilities(np.array([[1.0, 0.0, 0.0]]), np.array([0]), state)
    expected = math.exp(10) / (math.exp(10) + 2)
    assert abs(float(probabilities[0, 0]) - expected) < 1e-9
    assert after is state

    equal, _ = adacos_probabilities(np.ones((1, 3)) / math.sqrt(3), np.array([1]), state)
    assert torch.allclose(equal, torch.full((1, 3), 1 / 3, dtype=torch.float64))

    try:
        adacos_probabilities(np.zeros((1, 3)), np.array([0]), state)
        assert False, "zero-norm feature accepted"
    except NumericalError:
        pass
    try:
        adacos_probabilities(np.ones((1, 3)), np.array([5]), state)
        assert False, "label outside the class range accepted"
    except ContractError:
        pass


def test_adacos_probabilities_train():
    """Test that train mode re-estimates the scale with the batch rule."""
    print("Testing AdaCos scale update...")
    rng = np.random.default_rng(2)
    state = AdaCosState.initial(10, 16, seed=3)
    features = rng.normal(size=(8, 16))
    labels = rng.integers(0, 10, size=8)
    probabilities, after = adacos_probabilities(features, labels, state, mode="train")
    assert after.update_count == 1
    normalized = features / np.linalg.norm(features, axis=1, keepdims=True)
    cosines = normalized @ state.class_weights.T
    expected = reference_scale_update(cosines, labels, state.scale)
    assert abs(after.scale - expected) < 1e-9
    reference = torch.softmax(torch.as_tensor(expected * cosines), dim=1)
    assert torch.allclose(probabilities, reference, atol=1e-12)
    assert np.array_equal(after.class_weights, state.class_weights)


def test_cross_entropy_loss():
    """Test perfect, uniform and clamped predictions."""
    print("Testing cross entropy...")
    perfect = torch.eye(4, dtype=torch.float64)
    assert float(cross_entropy_loss(perfect, torch.arange(4))) == 0.0

    uniform = np.full((2, 1000), 1e-3)
    assert abs(float(cross_entropy_loss(uniform, np.array([3, 999]))) - math.log(1000)) < 1e-9

    before = warning_counts["clamped_probability"]
    clamped = cross_entropy_loss(np.array([[0.0, 1.0]]), np.array([0]))
    assert abs(float(clamped) + math.log(1e-12)) < 1e-9
    assert warning_counts["clamped_probability"] == before + 1

    try:
        cross_entropy_loss(np.array([[0.5, 0.2]]), np.array([0]))
        assert False, "unnormalized rows accepted"
    except ContractError:
        pass


def test_total_loss():
    """Test the weighted sum and its invariant."""
    print("Testing total loss...")
    parts = total_loss([1.0, 2.0, 3.0, 0.5], lambda_map=10)
    assert parts.L_all == 11.0
    assert total_loss([0, 0, 0, 0]).L_all == 0.0
    try:
        total_loss([1.0, -0.1, 0.0, 0.0])
        assert False, "negative part accepted"
    except ContractError:
        pass
    try:
        LossBreakdown(L_t=1, L_m=1, L_f=0, L_map=1, L_all=2, lambda_map=10)
        assert False, "inconsistent total accepted"
    except ValidationError:
        pass


def test_fixed_cosine_head_matches_reference():
    """Test a frozen-scale head against a direct softmax cross entropy."""
    print("Testing fixed-scale cosine head...")
    torch.manual_seed(0)
    head = CosineHead(8, 5, scale=12.0, dynamic=False)
    head.train()
    features = torch.randn(6, 8)
    labels = torch.tensor([0, 1, 2, 3, 4, 0])
    loss = F.cross_entropy(head(features, labels), labels)

    f = features.double().numpy()
    w = head.weight.detach().double().numpy()
    cosines = (f / np.linalg.norm(f, axis=1, keepdims=True)) @ (w / np.linalg.norm(w, axis=1, keepdims=True)).T
    logits = 12.0 * cosines
    log_probabilities = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expected = -log_probabilities[np.arange(6), labels.numpy()].mean()
    assert abs(float(loss) - expected) < 1e-5
    assert float(head.scale) == 12.0 and int(head.update_count) == 0


def test_dynamic_head_updates_scale():
    """Test the in-graph head against the batch rule and its eval-mode freeze."""
    print("Testing dynamic cosine head...")
    torch.manual_seed(1)
    head = CosineHead(8, 10).double()
    assert abs(float(head.scale) - initial_adacos_scale(10)) < 1e-12
    features = torch.randn(12, 8, dtype=torch.float64)
    labels = torch.arange(12) % 10
    start = float(head.scale)
    head.train()
    head(features, labels)
    cosines = F.normalize(features, dim=1) @ F.normalize(head.weight.detach(), dim=1).T
    assert abs(float(head.scale) - reference_scale_update(cosines.numpy(), labels.numpy(), start)) < 1e-9
    assert int(head.update_count) == 1

    head.eval()
    frozen = float(head.scale)
    head(features, labels)
    assert float(head.scale) == frozen and int(head.update_count) == 1


def test_class_weights_stay_unit_norm():
    """Test renormalization after optimizer steps."""
    print("Testing class weight renormalization...")
    torch.manual_seed(2)
    head = CosineHead(8, 4)
    optimizer = torch.optim.RMSprop(head.parameters(), lr=1e-2)
    features = torch.randn(8, 8)
    labels = torch.arange(8) % 4
    for _ in range(5):
        optimizer.zero_grad()
        F.cross_entropy(head(features, labels), labels).backward()
        optimizer.step()
        head.renormalize()
        assert torch.allclose(head.weight.norm(dim=1), torch.ones(4), atol=1e-6)
    assert np.allclose(np.linalg.norm(head.state().class_weights, axis=1), 1.0)


def test_make_head():
    """Test head construction by kind."""
    print("Testing make_head...")
    assert isinstance(make_head("adacos", 4, 3), CosineHead)
    fixed = make_head("fixed_cosine", 4, 3, fixed_scale=30.0)
    assert isinstance(fixed, CosineHead) and not fixed.dynamic and float(fixed.scale) == 30.0
    assert isinstance(make_head("softmax", 4, 3), SoftmaxHead)
    try:
        make_head("arcface", 4, 3)
        assert False, "unknown head accepted"
    except ValueError:
        pass


def main():
    """Run all loss tests."""
    tests = [
        test_minutia_map_loss,
        test_minutia_map_loss_input_kinds,
        test_initial_scale,
        test_adacos_probabilities_eval,
        test_adacos_probabilities_train,
        test_cross_entropy_loss,
        test_total_loss,
        test_fixed_cosine_head_matches_reference,
        test_dynamic_head_updates_scale,
        test_class_weights_stay_unit_norm,
        test_make_head,
    ]
    for test in tests:
        test()
    print("\nAll loss tests passed!")


if __name__ == "__main__":
    main()
