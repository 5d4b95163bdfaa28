"""Rate, distortion, perceptual and adversarial loss terms."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import torch
from torch import nn

__all__ = [
    "LossWeights",
    "PerceptualExtractorSpec",
    "RandomConvPyramid",
    "rate_loss_1d",
    "rate_loss_2d",
    "l2_distortion",
    "feature_distance",
    "perceptual_distance",
    "lsgan_discriminator_loss",
    "lsgan_generator_loss",
    "total_loss",
]


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class PerceptualExtractorSpec:
    """Feature stack for the perceptual distance.

    ``channels`` lists the output width of each 3x3 conv stage (stages after
    the first downsample by 2). ``weights`` holds one scalar per layer, or
    ``None`` for all ones.
    """

    channels: Sequence[int] = (16, 32, 32)
    weights: Optional[Sequence[float]] = None
    seed: int = 1234


def rate_loss_1d(r: torch.Tensor) -> torch.Tensor:
    """Rate term for the vector codec: the rate index itself."""
    return r


def rate_loss_2d(rate_map: torch.Tensor) -> torch.Tensor:
    """Rate term for the spatial codec: sum of the rate map over its last two axes."""
    return rate_map.sum(dim=(-2, -1))


def l2_distortion(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return torch.mean((x - y) ** 2)


class RandomConvPyramid(nn.Module):
    """Frozen, seeded conv stack returning the activation of every stage."""

    def __init__(self, spec: PerceptualExtractorSpec = PerceptualExtractorSpec(), in_channels: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(spec.seed)
        layers = []
        prev = in_channels
        for k, ch in enumerate(spec.channels):
            conv = nn.Conv2d(prev, ch, 3, stride=1 if k == 0 else 2, padding=1)
            with torch.no_grad():
                bound = (3.0 / (prev * 9)) ** 0.5
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                conv.bias.zero_()
            layers.append(conv)
            prev = ch
        self.layers = nn.ModuleList(layers)
        weights = spec.weights if spec.weights is not None else [1.0] * len(layers)
        if len(weights) != len(layers):
            raise ValueError("need one weight per layer")
        self.weights = [float(w) for w in weights]
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor):
        feats = []
        for conv in self.layers:
            x = torch.relu(conv(x))
            feats.append(x)
        return feats


def feature_distance(feats_x, feats_y, weights) -> torch.Tensor:
    """Per-sample ``sum_l 1/(H_l W_l) sum_hw ||w_l * (Fx - Fy)||^2``.

    Features are ``(B, C, H, W)``; each ``w_l`` is a scalar or a ``(C,)`` vector.
    """
    total = 0.0
    for fx, fy, w in zip(feats_x, feats_y, weights, strict=True):
        if fx.shape != fy.shape:
            raise ValueError(f"feature shape mismatch: {tuple(fx.shape)} vs {tuple(fy.shape)}")
        w = torch.as_tensor(w, dtype=fx.dtype, device=fx.device)
        if w.dim() == 1:
            w = w.view(1, -1, 1, 1)
        diff = w * (fx - fy)
        h, wd = fx.shape[-2:]
        total = total + (diff * diff).sum(dim=(1, 2, 3)) / (h * wd)
    return total


def perceptual_distance(x: torch.Tensor, y: torch.Tensor, extractor: RandomConvPyramid) -> torch.Tensor:
    """Per-sample perceptual distance of two ``(B, 3, H, W)`` image batches."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return feature_distance(extractor(x), extractor(y), extractor.weights)


def _nonempty(t: torch.Tensor, name: str) -> None:
    if t.numel() == 0:
        raise ValueError(f"{name} batch is empty")


def lsgan_discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    _nonempty(d_real, "d_real")
    _nonempty(d_fake, "d_fake")
    return torch.mean((d_real - 1) ** 2) + torch.mean(d_fake ** 2)


def lsgan_generator_loss(d_fake: torch.Tensor) -> torch.Tensor:
    _nonempty(d_fake, "d_fake")
    return torch.mean((d_fake - 1) ** 2)


Term = Union[torch.Tensor, float]


def total_loss(fidelity: Union[Term, Sequence[Term]], rate: Term, weights: LossWeights,
               semantic: Term = 0.0):
    """``fidelity + lam * semantic + gamma * rate``.

    ``fidelity`` may be a sequence of data terms (e.g. 2D and 3D joint
    losses), which are summed.
    """
    if isinstance(fidelity, (list, tuple)):
        fid = sum(fidelity[1:], fidelity[0]) if fidelity else 0.0
    else:
        fid = fidelity
    return fid + weights.lam * semantic + weights.gamma * rate
