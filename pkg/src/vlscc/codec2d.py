"""Spatially-variant variable-length codec for image features.

Tensors inside the networks are channel-first (``B, C, H, W``). Frames on the
wire use the channel-last ``(H2, W2, N)`` layout, so gathered symbols follow
raster order over locations and channel order within a location.

Encoder widths follow the reference layout (feature width 256, rate network
width 128, N = 512 symbols per location); all three are configurable so the
same architecture can be trained at desk scale.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, List, NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from vlscc import ratequant
from vlscc.channel import ChannelConfig, SymbolFrame, awgn, gather_kept, normalize_power, scatter_padded

__all__ = ["Codec2DConfig", "VLSCC2D", "Codec2DOutput", "center_crop16"]


@dataclass(frozen=True)
class Codec2DConfig:
    n_symbols: int = 512
    levels: int = 64
    feat_channels: int = 256
    ran_channels: int = 128
    seed: int = 0
    rate_allocation: bool = True
    fixed_symbols: Optional[int] = None
    ran_grad_leak: float = 0.01
    detach_rate_inputs: bool = True

    def __post_init__(self):
        if self.ran_grad_leak < 0:
            raise ValueError("ran_grad_leak must be >= 0")
        if min(self.n_symbols, self.feat_channels, self.ran_channels) < 1:
            raise ValueError("channel widths must be positive")
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if not self.rate_allocation:
            if self.fixed_symbols is None or not 0 < self.fixed_symbols <= self.n_symbols:
                raise ValueError("fixed-length codec needs 0 < fixed_symbols <= n_symbols")

    def to_dict(self) -> dict:
        return asdict(self)


def _conv(cin, cout, k, s):
    return nn.Conv2d(cin, cout, k, stride=s, padding=k // 2)


def _deconv(cin, cout, k, s):
    # output_padding makes a stride-2 layer exactly double the spatial size
    return nn.ConvTranspose2d(cin, cout, k, stride=s, padding=k // 2, output_padding=s - 1)


def init_weights(module: nn.Module, slope: float = 0.25) -> None:
    """Fan-in variance-scaled normal init (PReLU gain), zero biases.

    Transposed convs use their effective fan-in ``C_in k^2 / stride^2``.
    """
    gain = math.sqrt(2.0 / (1.0 + slope ** 2))
    for m in module.modules():
        if isinstance(m, nn.ConvTranspose2d):
            k = m.kernel_size[0] * m.kernel_size[1]
            fan_in = m.in_channels * k / (m.stride[0] * m.stride[1])
        elif isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
        else:
            continue
        nn.init.normal_(m.weight, 0.0, gain / math.sqrt(fan_in))
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def center_crop16(img: np.ndarray) -> np.ndarray:
    """Center-crop an ``(H, W, C)`` array so both sides are multiples of 16."""
    h, w = img.shape[:2]
    h2, w2 = h - h % 16, w - w % 16
    if h2 == 0 or w2 == 0:
        raise ValueError(f"image {h}x{w} is smaller than 16 pixels")
    top, left = (h - h2) // 2, (w - w2) // 2
    return img[top: top + h2, left: left + w2]


class Codec2DOutput(NamedTuple):
    image_hat: torch.Tensor
    rate_map: Optional[torch.Tensor]  # (B, H2, W2)
    quant: torch.Tensor  # (B, H2, W2) levels as float
    mask: torch.Tensor  # (B, N, H2, W2)
    sent: torch.Tensor  # (B, N, H2, W2)
    features: torch.Tensor
    features_hat: torch.Tensor


class VLSCC2D(nn.Module):
    def __init__(self, cfg: Codec2DConfig):
        super().__init__()
        self.cfg = cfg
        c1, n, cr = cfg.feat_channels, cfg.n_symbols, cfg.ran_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.semantic_encoder = nn.Sequential(
                _conv(3, c1, 9, 2), nn.PReLU(),
                _conv(c1, c1, 5, 2), nn.PReLU(),
                _conv(c1, c1, 5, 1),
            )
            self.ran = nn.Sequential(
                _conv(c1, cr, 5, 1), nn.PReLU(),
                _conv(cr, cr, 5, 1), nn.PReLU(),
                _conv(cr, cr, 5, 2), nn.PReLU(),
                _conv(cr, 1, 3, 2),
            ) if cfg.rate_allocation else None
            self.sce = nn.Sequential(
                _conv(c1 + 1, n, 5, 2), nn.PReLU(),
                _conv(n, n, 5, 1), nn.PReLU(),
                _conv(n, n, 5, 1),
                _conv(n, n, 3, 2),
            )
            self.scd = nn.Sequential(
                _deconv(n + 1, n, 3, 2),
                _conv(n, n, 5, 1), nn.PReLU(),
                _conv(n, n, 5, 1), nn.PReLU(),
                _deconv(n, c1, 5, 2),
            )
            self.semantic_decoder = nn.Sequential(
                _conv(c1, c1, 5, 1), nn.PReLU(),
                _deconv(c1, c1, 5, 2), nn.PReLU(),
                _deconv(c1, 3, 9, 2),
            )
            init_weights(self)

    # -- building blocks --------------------------------------------------

    @staticmethod
    def _check_image(img: torch.Tensor) -> None:
        if img.dim() != 4 or img.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(img.shape)}")
        if img.shape[2] % 16 or img.shape[3] % 16:
            raise ValueError(f"image size {tuple(img.shape[2:])} must be divisible by 16")

    def semantic_encode(self, img: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W) -> (B, C1, H/4, W/4)``."""
        self._check_image(img)
        return self.semantic_encoder(img)

    def _check_features(self, feats: torch.Tensor) -> None:
        c1 = self.cfg.feat_channels
        if feats.dim() != 4 or feats.shape[1] != c1 or feats.shape[2] % 4 or feats.shape[3] % 4:
            raise ValueError(f"expected (B, {c1}, H1, W1) features with H1, W1 divisible by 4, "
                             f"got {tuple(feats.shape)}")

    def rate_map(self, feats: torch.Tensor) -> torch.Tensor:
        """RAN forward: ``(B, C1, H1, W1) -> (B, H1/4, W1/4)`` in (0, 1)."""
        self._check_features(feats)
        if self.ran is None:
            raise RuntimeError("fixed-length codec has no rate allocation network")
        z = self.ran(feats)
        r = torch.sigmoid(z)
        if self.cfg.ran_grad_leak and z.requires_grad:
            # exact zero forward; keeps a gradient alive where the sigmoid saturates
            r = r + self.cfg.ran_grad_leak * (z - z.detach())
        return r.squeeze(1)

    def encode_symbols(self, feats: torch.Tensor, rate_map: torch.Tensor) -> torch.Tensor:
        """SCE forward: nearest-upsampled rate map joins the features as a channel."""
        self._check_features(feats)
        h1, w1 = feats.shape[-2:]
        if tuple(rate_map.shape[-2:]) != (h1 // 4, w1 // 4):
            raise ValueError(f"rate map {tuple(rate_map.shape[-2:])} does not match features {h1}x{w1}")
        up = F.interpolate(rate_map.unsqueeze(1), size=(h1, w1), mode="nearest")
        return self.sce(torch.cat([feats, up], dim=1))

    def decode_symbols(self, padded: torch.Tensor, q_norm: torch.Tensor) -> torch.Tensor:
        """SCD forward on ``(B, N, H2, W2)`` padded symbols and the normalized level map."""
        if padded.dim() != 4 or padded.shape[1] != self.cfg.n_symbols:
            raise ValueError(f"expected (B, {self.cfg.n_symbols}, H2, W2), got {tuple(padded.shape)}")
        if tuple(q_norm.shape) != (padded.shape[0], *padded.shape[2:]):
            raise ValueError("quant map shape does not match symbols")
        return self.scd(torch.cat([padded, q_norm.unsqueeze(1)], dim=1))

    def semantic_decode(self, feats_hat: torch.Tensor) -> torch.Tensor:
        """``(B, C1, H1, W1) -> (B, 3, 4 H1, 4 W1)`` with values in [0, 1]."""
        self._check_features(feats_hat)
        return torch.sigmoid(self.semantic_decoder(feats_hat))

    def _fixed_rate(self, feats: torch.Tensor, n_kept: int):
        cfg = self.cfg
        b, _, h1, w1 = feats.shape
        frac = torch.full((b, h1 // 4, w1 // 4), n_kept / cfg.n_symbols, dtype=feats.dtype, device=feats.device)
        mask = torch.zeros(b, cfg.n_symbols, h1 // 4, w1 // 4, dtype=feats.dtype, device=feats.device)
        mask[:, :n_kept] = 1
        return frac, mask

    def _rate_path(self, feats: torch.Tensor, fixed_symbols: Optional[int],
                   quant: Optional[torch.Tensor] = None):
        cfg = self.cfg
        if quant is not None:
            b, _, h1, w1 = feats.shape
            if tuple(quant.shape) != (b, h1 // 4, w1 // 4):
                raise ValueError(f"quant must have shape {(b, h1 // 4, w1 // 4)}, got {tuple(quant.shape)}")
            q = quant.detach().to(feats.dtype)
            mask = ratequant.rate_mask(q, cfg.n_symbols, cfg.levels).permute(0, 3, 1, 2)
            q_norm = q / (cfg.levels - 1)
            return None, q, q_norm, mask, q_norm
        n_fixed = fixed_symbols if fixed_symbols is not None else (
            None if cfg.rate_allocation else cfg.fixed_symbols)
        if n_fixed is not None:
            if not 0 <= n_fixed <= cfg.n_symbols:
                raise ValueError("fixed_symbols out of range")
            q_norm, mask = self._fixed_rate(feats, n_fixed)
            return None, q_norm * (cfg.levels - 1), q_norm, mask, q_norm
        rmap = self.rate_map(feats)
        q = ratequant.quantize_ste(rmap, cfg.levels)
        mask = ratequant.rate_mask(q, cfg.n_symbols, cfg.levels).permute(0, 3, 1, 2)
        if cfg.detach_rate_inputs:
            # the rate network then learns only from the mask and the rate loss
            return rmap, q, q.detach() / (cfg.levels - 1), mask, rmap.detach()
        return rmap, q, q / (cfg.levels - 1), mask, rmap

    # -- static-shape path (training) ------------------------------------

    def forward(self, img: torch.Tensor, channel: Optional[Callable] = None,
                fixed_symbols: Optional[int] = None, quant: Optional[torch.Tensor] = None) -> Codec2DOutput:
        """Training path with static shapes.

        ``quant`` (``(B, H2, W2)`` integer levels) replaces the rate network's
        output, e.g. to pre-train the symbol ordering with random rates.
        """
        feats = self.semantic_encode(img)
        rmap, q, q_norm, mask, sce_rate = self._rate_path(feats, fixed_symbols, quant)
        y = self.encode_symbols(feats, sce_rate)
        sent = normalize_power(y * mask, mask, frame_dims=3)
        received = channel(sent) * mask if channel is not None else sent
        feats_hat = self.decode_symbols(received, q_norm)
        return Codec2DOutput(self.semantic_decode(feats_hat), rmap, q, mask, sent, feats, feats_hat)

    # -- physical shortening path (evaluation) ---------------------------

    @torch.no_grad()
    def encode(self, img: torch.Tensor) -> List[SymbolFrame]:
        cfg = self.cfg
        feats = self.semantic_encode(img)
        _, q, _, mask, sce_rate = self._rate_path(feats, None)
        y = self.encode_symbols(feats, sce_rate)
        sent, degen = normalize_power(y * mask, mask, frame_dims=3, return_degenerate=True)
        frames = []
        for b in range(img.shape[0]):
            m = mask[b].permute(1, 2, 0)
            frames.append(SymbolFrame(
                kept=gather_kept(sent[b].permute(1, 2, 0), m),
                mask=m.to(torch.uint8).numpy(),
                quant=q[b].round().to(torch.int64).numpy() if cfg.rate_allocation else None,
                n_symbols=cfg.n_symbols,
                levels=cfg.levels,
                shape=tuple(m.shape),
                degenerate=bool(degen[b]),
            ))
        return frames

    @staticmethod
    def transmit(frames: List[SymbolFrame], channel: ChannelConfig, stream0: int = 0) -> List[SymbolFrame]:
        return [f.with_payload(awgn(f.kept, channel, stream=stream0 + k)) for k, f in enumerate(frames)]

    @torch.no_grad()
    def decode(self, frames: List[SymbolFrame]) -> torch.Tensor:
        cfg = self.cfg
        padded, q_norm = [], []
        for f in frames:
            if f.quant is None:
                h2, w2, n = f.shape
                p = torch.zeros(h2, w2, n, dtype=f.kept.dtype)
                p = p.masked_scatter(torch.as_tensor(f.mask).bool(), f.kept)
                qn = torch.full((h2, w2), float(f.mask[0, 0].sum()) / n, dtype=f.kept.dtype)
            else:
                p = scatter_padded(f.kept, f.quant, cfg.n_symbols, cfg.levels)
                qn = torch.as_tensor(f.quant, dtype=f.kept.dtype) / (cfg.levels - 1)
            padded.append(p.permute(2, 0, 1))
            q_norm.append(qn)
        feats_hat = self.decode_symbols(torch.stack(padded), torch.stack(q_norm))
        return self.semantic_decode(feats_hat)
