#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Losses: minutia map regression, cosine classification heads with adaptive
scale, and the combined multi-task objective.
"""

import logging
import math
from collections import Counter
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import ContractError, NumericalError
from features.minutia_map import MinutiaMap

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor]

# incremented when cross_entropy_loss clamps a zero label probability
warning_counts: Counter = Counter()


def initial_adacos_scale(num_classes: int) -> float:
    """sqrt(2) * log(C' - 1)."""
    if num_classes < 3:
        # log(1) = 0 would give a zero scale
        return math.sqrt(2.0) * math.log(2.0)
    return math.sqrt(2.0) * math.log(num_classes - 1)


def _tensor(value: ArrayLike, dtype=torch.float64) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(np.asarray(value), dtype=dtype)


def cosine_logits(features: torch.Tensor, class_weights: torch.Tensor) -> torch.Tensor:
    """cos(theta_ik) between normalized features and normalized class weights."""
    norms = features.norm(dim=1)
    if torch.any(norms <= 1e-12):
        raise NumericalError("zero-norm feature in cosine head")
    return F.linear(features / norms.unsqueeze(1), F.normalize(class_weights, dim=1))


@torch.no_grad()
def adacos_scale_update(cosines: torch.Tensor, labels: torch.Tensor, scale: float) -> float:
    """
    Dynamic AdaCos scale for one batch.

    B_avg = mean_i sum_{k != y_i} exp(scale * cos_ik), theta_med = median_i arccos(cos_iy_i),
    new scale = log(B_avg) / cos(min(pi/4, theta_med)).
    """
    cosines = cosines.detach()
    one_hot = F.one_hot(labels.long(), num_classes=cosines.shape[1]).to(torch.bool)
    others = torch.where(one_hot, torch.zeros_like(cosines), torch.exp(scale * cosines))
    b_avg = others.sum(dim=1).mean()
    theta = torch.acos(cosines[one_hot].clamp(-1.0 + 1e-7, 1.0 - 1e-7))
    theta_med = torch.quantile(theta.to(torch.float64), 0.5)
    new_scale = float(torch.log(b_avg) / torch.cos(torch.clamp(theta_med, max=math.pi / 4)))
    if not new_scale > 0:
        # B_avg < 1 happens only for tiny class counts; the scale must stay positive
        logger.debug(f"AdaCos update gave scale {new_scale}, keeping {scale}")
        return scale
    return new_scale


class AdaCosState(BaseModel):
    """Class weights (unit rows), current scale and number of scale updates."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    class_weights: np.ndarray
    scale: float = Field(gt=0)
    update_count: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_rows(self) -> "AdaCosState":
        norms = np.linalg.norm(self.class_weights, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("class weight rows must have unit norm")
        return self

    @classmethod
    def initial(cls, num_classes: int, dim: int, seed: int = 0) -> "AdaCosState":
        weights = np.random.default_rng(seed).normal(size=(num_classes, dim))
        weights /= np.linalg.norm(weights, axis=1, keepdims=True)
        return cls(class_weights=weights, scale=initial_adacos_scale(num_classes))


def adacos_probabilities(features: ArrayLike, labels: ArrayLike, state: AdaCosState,
                         mode: str = "eval") -> Tuple[torch.Tensor, AdaCosState]:
    """
    Softmax of scale * cos(theta) over classes.

    In ``train`` mode the scale is re-estimated from the batch first and
    update_count increments; in ``eval`` mode the state is returned unchanged.

    Returns:
        tuple: ((N, C') probabilities, new state)
    """
    features = _tensor(features)
    labels = _tensor(labels, torch.long).long()
    weights = torch.as_tensor(state.class_weights, dtype=features.dtype)
    if labels.numel() and int(labels.max()) >= weights.shape[0]:
        raise ContractError(f"label {int(labels.max())} outside [0, {weights.shape[0]})")
    cosines = cosine_logits(features, weights)
    if mode == "train":
        scale = adacos_scale_update(cosines, labels, state.scale)
        state = state.model_copy(update={"scale": scale, "update_count": state.update_count + 1})
    elif mode != "eval":
        raise ValueError(f"Unknown mode: {mode}")
    return F.softmax(state.scale * cosines, dim=1), state


def cross_entropy_loss(probabilities: ArrayLike, labels: ArrayLike) -> torch.Tensor:
    """
    Mean negative log probability of the labels.

    Zero label probabilities are clamped at 1e-12 and counted in
    ``warning_counts['clamped_probability']``.
    """
    probabilities = _tensor(probabilities)
    labels = _tensor(labels, torch.long).long()
    sums = probabilities.sum(dim=1)
    if torch.any(torch.abs(sums - 1.0) > 1e-5):
        raise ContractError("probability rows must sum to 1")
    picked = probabilities.gather(1, labels.view(-1, 1)).squeeze(1)
    clamped = int((picked < 1e-12).sum())
    if clamped:
        warning_counts["clamped_probability"] += clamped
        logger.warning(f"Clamped {clamped} zero label probabilities at 1e-12")
    return -torch.log(picked.clamp(min=1e-12)).mean()


class CosineHead(nn.Module):
    """
    Scaled-cosine classifier. With ``dynamic`` the scale follows the AdaCos
    rule on every training batch; otherwise it stays at its initial value.
    """

    def __init__(self, embedding_dim: int, num_classes: int, scale: Optional[float] = None,
                 dynamic: bool = True):
        super().__init__()
        self.weight = nn.Parameter(F.normalize(torch.randn(num_classes, embedding_dim), dim=1))
        self.dynamic = dynamic
        self.register_buffer("scale", torch.tensor(scale if scale is not None else initial_adacos_scale(num_classes),
                                                   dtype=torch.float64))
        self.register_buffer("update_count", torch.tensor(0, dtype=torch.long))

    def forward(self, features: torch.Tensor, labels: Optional[torch.Tensor] = None) -> torch.Tensor:
        cosines = cosine_logits(features, self.weight)
        if self.training and self.dynamic and labels is not None:
            self.scale.fill_(adacos_scale_update(cosines, labels, float(self.scale)))
            self.update_count += 1
        return self.scale.to(cosines.dtype) * cosines

    @torch.no_grad()
    def renormalize(self) -> None:
        self.weight.copy_(F.normalize(self.weight, dim=1))

    def state(self) -> AdaCosState:
        weights = F.normalize(self.weight.detach().to(torch.float64), dim=1).cpu().numpy()
        return AdaCosState(class_weights=weights, scale=float(self.scale), update_count=int(self.update_count))


class SoftmaxHead(nn.Module):
    """Plain affine softmax classifier."""

    def __init__(self, embedding_dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(embedding_dim, num_classes)

    def forward(self, features: torch.Tensor, labels: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.fc(features)


def make_head(kind: str, embedding_dim: int, num_classes: int, fixed_scale: Optional[float] = None) -> nn.Module:
    """Build an ``adacos``, ``fixed_cosine`` or ``softmax`` head."""
    if kind == "adacos":
        return CosineHead(embedding_dim, num_classes, dynamic=True)
    if kind == "fixed_cosine":
        return CosineHead(embedding_dim, num_classes, scale=fixed_scale, dynamic=False)
    if kind == "softmax":
        return SoftmaxHead(embedding_dim, num_classes)
    raise ValueError(f"Unknown head: {kind}")


def head_scale(head: nn.Module) -> Optional[float]:
    return float(head.scale) if isinstance(head, CosineHead) else None


def minutia_map_loss(h_g, h_e, rho: float = 100.0):
    """
    rho * sum over (channel, row, column) of (H_g - H_e)^2.

    Batched (B, C, H, W) inputs return the mean over the batch of the
    per-sample sums. Works on MinutiaMap, numpy arrays and tensors.
    """
    h_g = h_g.values if isinstance(h_g, MinutiaMap) else h_g
    h_e = h_e.values if isinstance(h_e, MinutiaMap) else h_e
    if tuple(h_g.shape) != tuple(h_e.shape):
        raise ContractError(f"minutia map shapes differ: {tuple(h_g.shape)} vs {tuple(h_e.shape)}")
    if isinstance(h_e, torch.Tensor) or isinstance(h_g, torch.Tensor):
        h_e = _tensor(h_e)
        h_g = _tensor(h_g).to(h_e.dtype)
        squared = (h_g - h_e) ** 2
        if squared.dim() == 4:
            return rho * squared.sum(dim=(1, 2, 3)).mean()
        return rho * squared.sum()
    squared = (np.asarray(h_g, dtype=np.float64) - np.asarray(h_e, dtype=np.float64)) ** 2
    if squared.ndim == 4:
        return float(rho * squared.sum(axis=(1, 2, 3)).mean())
    return float(rho * squared.sum())


class LossBreakdown(BaseModel):
    """Per-task losses and their weighted total."""
    model_config = ConfigDict(frozen=True)

    L_t: float = Field(ge=0)
    L_m: float = Field(ge=0)
    L_f: float = Field(ge=0)
    L_map: float = Field(ge=0)
    L_all: float = Field(ge=0)
    lambda_map: float = Field(ge=0)

    @model_validator(mode="after")
    def check_total(self) -> "LossBreakdown":
        expected = self.L_t + self.L_m + self.L_f + self.lambda_map * self.L_map
        if abs(self.L_all - expected) > 1e-6 * max(1.0, abs(expected)):
            raise ValueError(f"L_all {self.L_all} does not equal the weighted sum {expected}")
        return self


def total_loss(parts: Sequence[float], lambda_map: float = 10.0) -> LossBreakdown:
    """
    L_all = L_t + L_m + L_f + lambda_map * L_map; absent branches pass 0.

    Raises:
        ContractError: If a part is negative.
    """
    l_t, l_m, l_f, l_map = (float(p) for p in parts)
    for name, value in (("L_t", l_t), ("L_m", l_m), ("L_f", l_f), ("L_map", l_map)):
        if value < 0 or not math.isfinite(value):
            raise ContractError(f"{name} must be a nonnegative number, got {value}")
    return LossBreakdown(L_t=l_t, L_m=l_m, L_f=l_f, L_map=l_map,
                         L_all=l_t + l_m + l_f + lambda_map * l_map, lambda_map=lambda_map)
