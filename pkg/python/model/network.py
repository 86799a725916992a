#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Multi-branch fingerprint embedding network.

    image -> STN (rotation only) -> aligned image
        aligned -> stem -> shared trunk (32x32 at 256 px input)
            -> texture branch -> X_L (C_L x 16 x 16) -> GAP or MAM -> t_tex
            -> minutia branch -> mid feature -> map generator -> H_e (6 x 128 x 128)
                              -> C_L map -> GAP -> affine -> t_min
        aligned -> zero mean -> DFT band crop -> frequency branch -> t_freq

Every branch feature has K dimensions; the embedding is the unit-norm
concatenation of the unit-norm branch features.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, field_validator

from config import ModelConfig
from errors import ContractError, NumericalError
from features.minutia_map import attention_mask_tensor
from model.losses import make_head

logger = logging.getLogger(__name__)

BRANCHES = ("texture", "minutia", "frequency")


class FingerprintEmbedding(BaseModel):
    """Unit-norm fingerprint feature and the norm it had before the final normalization."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    vector: np.ndarray
    norm: float

    @field_validator("vector")
    @classmethod
    def check_unit(cls, vector: np.ndarray) -> np.ndarray:
        if vector.ndim != 1 or abs(float(np.linalg.norm(vector)) - 1.0) > 1e-6:
            raise ValueError("embedding must be a unit-norm vector")
        return vector


@dataclass
class BranchOutputs:
    """Per-branch features of a batch; t_freq is None when the frequency branch is off."""
    t_tex: torch.Tensor
    t_min: torch.Tensor
    t_freq: Optional[torch.Tensor]
    h_e: torch.Tensor
    theta_hat: torch.Tensor
    x_l: torch.Tensor
    aligned: torch.Tensor
    attention: Optional[torch.Tensor] = None

    def features(self) -> Dict[str, torch.Tensor]:
        named = {"texture": self.t_tex, "minutia": self.t_min}
        if self.t_freq is not None:
            named["frequency"] = self.t_freq
        return named


def conv_bn_relu(in_channels: int, out_channels: int, stride: int = 1, kernel_size: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class ResBlock(nn.Module):
    """Basic residual block; a 1x1 projection matches the shortcut when shape changes."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
        )
        self.shortcut = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.body(x) + self.shortcut(x))


class UpBlock(nn.Module):
    """Residual block that doubles the resolution with a transposed convolution."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ConvTranspose2d(in_channels, out_channels, 3, stride=2, padding=1, output_padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
        )
        self.shortcut = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.body(x) + self.shortcut(x))


def _as_batch(image: Union[torch.Tensor, np.ndarray]) -> Tuple[torch.Tensor, int]:
    tensor = torch.as_tensor(image)
    dims = tensor.dim()
    while tensor.dim() < 4:
        tensor = tensor.unsqueeze(0)
    return tensor, dims


def rotate_bilinear(image: Union[torch.Tensor, np.ndarray],
                    theta: Union[torch.Tensor, float]) -> Union[torch.Tensor, np.ndarray]:
    """
    Rotate about the image center with bilinear sampling and zero padding.

    Output pixel q reads the input at R(theta) q (coordinates relative to the
    center, y pointing down). Differentiable in both the image and theta.
    Only square images are accepted: the sampling grid is normalized per axis,
    so a rectangle would be stretched rather than rotated.

    Args:
        image: (H, W), (C, H, W) or (B, C, H, W) array or tensor.
        theta: Scalar or (B,) angles in radians, |theta| <= pi.

    Returns:
        Rotated image with the input's type and shape.

    Raises:
        ContractError: If height and width differ.
    """
    as_numpy = isinstance(image, np.ndarray)
    batch, dims = _as_batch(image)
    if batch.shape[-1] != batch.shape[-2]:
        raise ContractError(f"rotation needs a square image, got {tuple(batch.shape[-2:])}")
    theta = torch.as_tensor(theta, dtype=batch.dtype, device=batch.device)
    if theta.dim() == 0:
        theta = theta.expand(batch.shape[0])
    if as_numpy and not torch.any(theta != 0):
        return image.copy()

    cos_t, sin_t = torch.cos(theta), torch.sin(theta)
    zeros = torch.zeros_like(theta)
    matrix = torch.stack([
        torch.stack([cos_t, -sin_t, zeros], dim=1),
        torch.stack([sin_t, cos_t, zeros], dim=1),
    ], dim=1)
    grid = F.affine_grid(matrix, list(batch.shape), align_corners=False)
    rotated = F.grid_sample(batch, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    while rotated.dim() > dims:
        rotated = rotated.squeeze(0)
    return rotated.detach().numpy() if as_numpy else rotated


class LocalizationNet(nn.Module):
    """Regresses one bounded rotation angle per image."""

    def __init__(self, widths: Sequence[int], rotation_bound: float):
        super().__init__()
        layers = []
        in_channels = 1
        for width in widths:
            layers.append(conv_bn_relu(in_channels, width, stride=2))
            in_channels = width
        self.features = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.regressor = nn.Linear(in_channels, 1)
        self.rotation_bound = rotation_bound
        nn.init.zeros_(self.regressor.weight)
        nn.init.zeros_(self.regressor.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.regressor(self.features(images))).squeeze(1) * self.rotation_bound


def spectrum_tensor(images: torch.Tensor, band_fraction: float, elliptical_mask: bool = False) -> torch.Tensor:
    """
    In-graph counterpart of preprocess.to_spectrum for a (B, 1, H, W) batch.

    Returns:
        torch.Tensor: (B, 2, band_h, band_w) real and imaginary parts, DC at
        (band_h // 2, band_w // 2).
    """
    h, w = images.shape[-2:]
    band_h, band_w = int(round(band_fraction * h)), int(round(band_fraction * w))
    centered = images - images.mean(dim=(-2, -1), keepdim=True)
    spectrum = torch.fft.fftshift(torch.fft.fft2(centered[:, 0]), dim=(-2, -1))
    top, left = h // 2 - band_h // 2, w // 2 - band_w // 2
    patch = spectrum[:, top:top + band_h, left:left + band_w]
    stacked = torch.stack([patch.real, patch.imag], dim=1)
    if elliptical_mask:
        v = (torch.arange(band_h, dtype=stacked.dtype, device=stacked.device) - band_h // 2) / (band_h / 2.0)
        u = (torch.arange(band_w, dtype=stacked.dtype, device=stacked.device) - band_w // 2) / (band_w / 2.0)
        inside = (v[:, None] ** 2 + u[None, :] ** 2 <= 1.0).to(stacked.dtype)
        stacked = stacked * inside
    return stacked


def texture_head_gap(x_l: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    t_tex = GAP(X_L) W_FC.

    Args:
        x_l: (B, C_L, H_L, W_L) or (C_L, H_L, W_L) feature map.
        weight: (K, C_L) affine weights (torch layout).
        bias: Optional (K,) bias.
    """
    return F.linear(x_l.mean(dim=(-2, -1)), weight, bias)


def spatial_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the H x W positions, independently per channel."""
    flat = logits.flatten(start_dim=-2)
    return F.softmax(flat, dim=-1).view_as(logits)


def minutia_attention(y: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """MA_c = sum_ij A_ij Y_c,ij for (B, C', H, W) probabilities and (B, H, W) masks."""
    return (y * mask.unsqueeze(-3)).sum(dim=(-2, -1))


def texture_head_mam(x_l: torch.Tensor, mask: torch.Tensor, proj_weight: torch.Tensor,
                     fc_weight: torch.Tensor, proj_bias: Optional[torch.Tensor] = None,
                     fc_bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Minutia attention pooling of the texture feature map.

    Y = spatial softmax of the 1x1 projection of X_L to C' channels,
    MA = sum over cells of A * Y, t_tex_att = MA W_FC.

    Args:
        x_l: (B, C_L, H_L, W_L) feature map.
        mask: (B, H_L, W_L) attention mask, each summing to 1.
        proj_weight: (C', C_L) or (C', C_L, 1, 1) projection weights.
        fc_weight: (K, C') affine weights.
    """
    if proj_weight.dim() == 2:
        proj_weight = proj_weight[:, :, None, None]
    y = spatial_softmax(F.conv2d(x_l, proj_weight, proj_bias))
    return F.linear(minutia_attention(y, mask), fc_weight, fc_bias)


class FingerprintEmbedder(nn.Module):
    """STN, shared trunk, texture/minutia/frequency branches and map generator."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.localization = LocalizationNet(c.localization_widths, c.rotation_bound)

        self.stem = conv_bn_relu(1, c.stem_width, stride=2)
        self.trunk = nn.Sequential(
            ResBlock(c.stem_width, c.trunk_widths[0], stride=2),
            ResBlock(c.trunk_widths[0], c.trunk_widths[1], stride=2),
        )

        self.texture_branch = nn.Sequential(
            ResBlock(c.trunk_widths[1], c.branch_widths[0], stride=2),
            ResBlock(c.branch_widths[0], c.branch_widths[1], stride=1),
            conv_bn_relu(c.branch_widths[1], c.feature_channels, kernel_size=1),
        )
        if c.use_mam:
            self.mam_projection = nn.Conv2d(c.feature_channels, c.num_classes, 1)
            self.texture_fc = nn.Linear(c.num_classes, c.embedding_dim)
        else:
            self.texture_fc = nn.Linear(c.feature_channels, c.embedding_dim)

        self.minutia_mid = ResBlock(c.trunk_widths[1], c.branch_widths[0], stride=1)
        self.minutia_branch = nn.Sequential(
            ResBlock(c.branch_widths[0], c.branch_widths[1], stride=2),
            conv_bn_relu(c.branch_widths[1], c.feature_channels, kernel_size=1),
        )
        self.minutia_fc = nn.Linear(c.feature_channels, c.embedding_dim)

        self.map_generator = nn.Sequential(
            UpBlock(c.branch_widths[0], c.map_widths[0]),
            UpBlock(c.map_widths[0], c.map_widths[1]),
            nn.Conv2d(c.map_widths[1], c.map_channels, 1),
            nn.Softplus(),
        )

        if c.use_frequency:
            w = c.frequency_widths
            self.frequency_branch = nn.Sequential(
                conv_bn_relu(2, c.stem_width, stride=2),
                ResBlock(c.stem_width, w[0], stride=2),
                ResBlock(w[0], w[1], stride=2),
                ResBlock(w[1], w[2], stride=2),
                nn.AdaptiveAvgPool2d(1),
                nn.Flatten(),
            )
            self.frequency_fc = nn.Linear(w[2], c.embedding_dim)

        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        # softplus(-4) ~ 0.018 keeps the initial map near the mostly-empty target
        head = self.map_generator[2]
        nn.init.normal_(head.weight, std=1e-3)
        nn.init.constant_(head.bias, -4.0)

    def stn_parameters(self) -> Iterator[nn.Parameter]:
        return self.localization.parameters()

    def feature_parameters(self) -> Iterator[nn.Parameter]:
        stn = {id(p) for p in self.localization.parameters()}
        return (p for p in self.parameters() if id(p) not in stn)

    def stn_align(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Rotate each image by its regressed angle; returns (aligned, theta_hat)."""
        theta = self.localization(images)
        rotated = rotate_bilinear(images, theta)
        if not self.training:
            # exact identity when the regressed angle is exactly zero
            rotated = torch.where((theta == 0).view(-1, 1, 1, 1), images, rotated)
        return rotated, theta

    def attention_mask(self, h_e: torch.Tensor, h_g: Optional[torch.Tensor]) -> torch.Tensor:
        source = h_e
        if self.config.mask_source == "ground_truth" and h_g is not None:
            source = h_g.to(h_e.dtype)
        side = self.config.feature_side
        return attention_mask_tensor(source, (side, side))

    def forward(self, images: torch.Tensor, h_g: Optional[torch.Tensor] = None) -> BranchOutputs:
        side = self.config.input_side
        if images.dim() != 4 or images.shape[1] != 1 or tuple(images.shape[-2:]) != (side, side):
            raise ContractError(f"expected a (B, 1, {side}, {side}) batch, got {tuple(images.shape)}")

        aligned, theta = self.stn_align(images)
        mid = self.trunk(self.stem(aligned))

        x_l = self.texture_branch(mid)
        minutia_mid = self.minutia_mid(mid)
        h_e = self.map_generator(minutia_mid)

        attention = None
        if self.config.use_mam:
            attention = self.attention_mask(h_e, h_g)
            t_tex = texture_head_mam(x_l, attention, self.mam_projection.weight, self.texture_fc.weight,
                                     self.mam_projection.bias, self.texture_fc.bias)
        else:
            t_tex = texture_head_gap(x_l, self.texture_fc.weight, self.texture_fc.bias)

        t_min = self.minutia_fc(self.minutia_branch(minutia_mid).mean(dim=(-2, -1)))

        t_freq = None
        if self.config.use_frequency:
            spectrum = spectrum_tensor(aligned, self.config.band_fraction, self.config.elliptical_mask)
            t_freq = self.frequency_fc(self.frequency_branch(spectrum))

        return BranchOutputs(t_tex=t_tex, t_min=t_min, t_freq=t_freq, h_e=h_e, theta_hat=theta,
                             x_l=x_l, aligned=aligned, attention=attention)


class MultiTaskModel(nn.Module):
    """Embedder plus one classification head per enabled branch."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embedder = FingerprintEmbedder(config)
        branches = BRANCHES if config.use_frequency else BRANCHES[:2]
        self.heads = nn.ModuleDict({
            name: make_head(config.head, config.embedding_dim, config.num_classes, config.fixed_scale)
            for name in branches
        })

    def stn_parameters(self) -> List[nn.Parameter]:
        return list(self.embedder.stn_parameters())

    def feature_parameters(self) -> List[nn.Parameter]:
        stn = {id(p) for p in self.embedder.stn_parameters()}
        return [p for p in self.parameters() if id(p) not in stn]

    def forward(self, images: torch.Tensor, labels: Optional[torch.Tensor] = None,
                h_g: Optional[torch.Tensor] = None) -> Tuple[BranchOutputs, Dict[str, torch.Tensor]]:
        outputs = self.embedder(images, h_g)
        features = outputs.features()
        logits = {name: head(features[name], labels) for name, head in self.heads.items()}
        return outputs, logits

    def renormalize_heads(self) -> None:
        for head in self.heads.values():
            if hasattr(head, "renormalize"):
                head.renormalize()


def forward(model: Union[FingerprintEmbedder, MultiTaskModel], images: torch.Tensor,
            mode: str = "infer", h_g: Optional[torch.Tensor] = None) -> BranchOutputs:
    """Run the embedder in ``train`` (batch statistics, gradients) or ``infer`` mode."""
    if mode not in ("train", "infer"):
        raise ValueError(f"Unknown mode: {mode}")
    embedder = model.embedder if isinstance(model, MultiTaskModel) else model
    embedder.train(mode == "train")
    with torch.set_grad_enabled(mode == "train"):
        return embedder(images, h_g)


def assemble_embedding_tensor(outputs: BranchOutputs, config: ModelConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Normalize each branch feature, concatenate (texture, minutia, frequency), renormalize.

    Returns:
        tuple: ((B, D) unit-norm embeddings, (B,) norms before the final normalization)

    Raises:
        NumericalError: If a branch feature has zero norm.
    """
    parts = []
    for name, feature in outputs.features().items():
        if name == "frequency" and not config.use_frequency:
            continue
        norms = feature.norm(dim=-1, keepdim=True)
        if not torch.all(torch.isfinite(feature)):
            raise NumericalError(f"non-finite {name} feature", branch=name)
        if torch.any(norms <= 1e-12):
            raise NumericalError(f"zero-norm {name} feature", branch=name)
        parts.append(feature / norms)
    joined = torch.cat(parts, dim=-1)
    norms = joined.norm(dim=-1)
    return joined / norms.unsqueeze(-1), norms


def assemble_embedding(outputs: BranchOutputs, config: ModelConfig) -> List[FingerprintEmbedding]:
    """One FingerprintEmbedding per batch element, in double precision."""
    vectors, norms = assemble_embedding_tensor(outputs, config)
    vectors = vectors.detach().to(torch.float64)
    vectors = vectors / vectors.norm(dim=-1, keepdim=True)
    return [FingerprintEmbedding(vector=v.cpu().numpy(), norm=float(n)) for v, n in zip(vectors, norms)]


def images_to_tensor(images: Sequence[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack 2-D pixel arrays into a (B, 1, H, W) tensor."""
    return torch.as_tensor(np.stack([np.asarray(i) for i in images])[:, None], dtype=dtype)


@torch.no_grad()
def extract_embeddings(model: Union[FingerprintEmbedder, MultiTaskModel], images: Sequence[np.ndarray],
                       batch_size: int = 16) -> np.ndarray:
    """
    Embed preprocessed images in inference mode.

    Returns:
        np.ndarray: (N, D) float64 unit-norm embeddings.
    """
    embedder = model.embedder if isinstance(model, MultiTaskModel) else model
    embedder.eval()
    dtype = next(embedder.parameters()).dtype
    chunks = []
    for start in range(0, len(images), batch_size):
        batch = images_to_tensor(images[start:start + batch_size], dtype)
        outputs = embedder(batch)
        vectors, _ = assemble_embedding_tensor(outputs, embedder.config)
        chunks.append(vectors.to(torch.float64).numpy())
    if not chunks:
        return np.zeros((0, embedder.config.embedding_size))
    return np.concatenate(chunks)
