"""Variable-length semantic-channel codec for vector-valued semantic information.

A rate allocation network (RAN) maps ``x`` to a rate index ``r`` in (0, 1);
``r`` is quantized to ``L`` levels and expanded into a prefix mask over the
``N`` symbols produced by the semantic-channel encoder (SCE). Only the masked
prefix is transmitted; the decoder (SCD) sees the zero-padded received symbols
together with the normalized level ``q / (L - 1)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, List, NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from vlscc import ratequant
from vlscc.channel import ChannelConfig, SymbolFrame, awgn, normalize_power, zero_pad

__all__ = ["Codec1DConfig", "VLSCC1D", "CodecOutput", "mlp"]


@dataclass(frozen=True)
class Codec1DConfig:
    dim: int = 85
    n_symbols: int = 4000
    levels: int = 64
    hidden: int = 1024
    sce_layers: int = 6
    scd_layers: int = 6
    ran_layers: int = 4
    seed: int = 0
    rate_allocation: bool = True
    fixed_symbols: Optional[int] = None

    def __post_init__(self):
        if min(self.dim, self.n_symbols, self.hidden) < 1:
            raise ValueError("dim, n_symbols and hidden must be positive")
        if min(self.sce_layers, self.scd_layers, self.ran_layers) < 1:
            raise ValueError("layer counts must be >= 1")
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if not self.rate_allocation:
            if self.fixed_symbols is None or not 0 < self.fixed_symbols <= self.n_symbols:
                raise ValueError("fixed-length codec needs 0 < fixed_symbols <= n_symbols")

    def to_dict(self) -> dict:
        return asdict(self)


def mlp(in_features: int, out_features: int, hidden: int, layers: int) -> nn.Sequential:
    """``layers`` Linear layers with PReLU between them."""
    widths = [in_features] + [hidden] * (layers - 1) + [out_features]
    mods: List[nn.Module] = []
    for k in range(layers):
        mods.append(nn.Linear(widths[k], widths[k + 1]))
        if k < layers - 1:
            mods.append(nn.PReLU())
    return nn.Sequential(*mods)


class CodecOutput(NamedTuple):
    x_hat: torch.Tensor
    rate: Optional[torch.Tensor]  # continuous rate index, (B,)
    quant: torch.Tensor  # level as float, (B,)
    mask: torch.Tensor  # (B, N)
    sent: torch.Tensor  # power-normalized masked symbols, (B, N)


ChannelFn = Callable[[torch.Tensor], torch.Tensor]


class VLSCC1D(nn.Module):
    def __init__(self, cfg: Codec1DConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.ran = mlp(cfg.dim, 1, cfg.hidden, cfg.ran_layers) if cfg.rate_allocation else None
            self.sce = mlp(cfg.dim + 1, cfg.n_symbols, cfg.hidden, cfg.sce_layers)
            self.scd = mlp(cfg.n_symbols + 1, cfg.dim, cfg.hidden, cfg.scd_layers)

    # -- building blocks --------------------------------------------------

    def _check_x(self, x: torch.Tensor) -> None:
        if x.shape[-1] != self.cfg.dim:
            raise ValueError(f"expected semantic dimension {self.cfg.dim}, got {x.shape[-1]}")

    def rate_index(self, x: torch.Tensor) -> torch.Tensor:
        """RAN forward: ``(B, D) -> (B,)`` values in (0, 1)."""
        self._check_x(x)
        if self.ran is None:
            raise RuntimeError("fixed-length codec has no rate allocation network")
        return torch.sigmoid(self.ran(x)).squeeze(-1)

    def encode_symbols(self, x: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        """SCE forward: ``(B, D), (B,) -> (B, N)`` with ``r`` appended to ``x``."""
        self._check_x(x)
        return self.sce(torch.cat([x, r.unsqueeze(-1)], dim=-1))

    def decode_symbols(self, p: torch.Tensor, q_norm: torch.Tensor) -> torch.Tensor:
        """SCD forward on zero-padded symbols and the normalized level."""
        if p.shape[-1] != self.cfg.n_symbols:
            raise ValueError(f"expected {self.cfg.n_symbols} padded symbols, got {p.shape[-1]}")
        return self.scd(torch.cat([p, q_norm.unsqueeze(-1)], dim=-1))

    def _fixed_rate(self, x: torch.Tensor, n_kept: int):
        cfg = self.cfg
        frac = torch.full(x.shape[:-1], n_kept / cfg.n_symbols, dtype=x.dtype, device=x.device)
        mask = torch.zeros(*x.shape[:-1], cfg.n_symbols, dtype=x.dtype, device=x.device)
        mask[..., :n_kept] = 1
        return frac, mask

    # -- static-shape path (training) ------------------------------------

    def forward(self, x: torch.Tensor, channel: Optional[ChannelFn] = None,
                fixed_symbols: Optional[int] = None, quant: Optional[torch.Tensor] = None) -> CodecOutput:
        """Full encode/channel/decode with mask multiplication and STE gradients.

        ``channel`` maps the power-normalized masked symbols to received ones;
        the mask is re-applied afterwards so dropped positions stay exactly 0.
        ``fixed_symbols`` bypasses the rate path with a constant prefix mask;
        ``quant`` (one integer level per sample) replaces the rate network.
        """
        cfg = self.cfg
        n_fixed = fixed_symbols if fixed_symbols is not None else (
            None if cfg.rate_allocation else cfg.fixed_symbols)
        if n_fixed is not None:
            if not 0 <= n_fixed <= cfg.n_symbols:
                raise ValueError("fixed_symbols out of range")
            r = None
            q_norm, mask = self._fixed_rate(x, n_fixed)
            y = self.encode_symbols(x, q_norm)
            q = q_norm * (cfg.levels - 1)
        elif quant is not None:
            if tuple(quant.shape) != tuple(x.shape[:-1]):
                raise ValueError(f"quant must have shape {tuple(x.shape[:-1])}, got {tuple(quant.shape)}")
            r = None
            q = quant.detach().to(x.dtype)
            mask = ratequant.rate_mask(q, cfg.n_symbols, cfg.levels)
            q_norm = q / (cfg.levels - 1)
            y = self.encode_symbols(x, q_norm)
        else:
            r = self.rate_index(x)
            q = ratequant.quantize_ste(r, cfg.levels)
            mask = ratequant.rate_mask(q, cfg.n_symbols, cfg.levels)
            y = self.encode_symbols(x, r)
            q_norm = q / (cfg.levels - 1)
        sent = normalize_power(y * mask, mask)
        received = channel(sent) * mask if channel is not None else sent
        x_hat = self.decode_symbols(received, q_norm)
        return CodecOutput(x_hat, r, q, mask, sent)

    # -- physical shortening path (evaluation) ---------------------------

    @torch.no_grad()
    def encode(self, x: torch.Tensor) -> List[SymbolFrame]:
        """Encode a batch into shortened frames (one per sample)."""
        cfg = self.cfg
        x = x.reshape(-1, cfg.dim)
        if cfg.rate_allocation:
            r = self.rate_index(x)
            q = ratequant.quantize_ste(r, cfg.levels)
            mask = ratequant.rate_mask(q, cfg.n_symbols, cfg.levels)
            y = self.encode_symbols(x, r)
        else:
            frac, mask = self._fixed_rate(x, cfg.fixed_symbols)
            q = None
            y = self.encode_symbols(x, frac)
        sent, degen = normalize_power(y * mask, mask, return_degenerate=True)
        frames = []
        for b in range(x.shape[0]):
            m = mask[b].to(torch.uint8).numpy()
            frames.append(SymbolFrame(
                kept=sent[b][mask[b].bool()],
                mask=m,
                quant=int(q[b]) if q is not None else None,
                n_symbols=cfg.n_symbols,
                levels=cfg.levels,
                shape=(cfg.n_symbols,),
                degenerate=bool(degen[b]),
            ))
        return frames

    @staticmethod
    def transmit(frames: List[SymbolFrame], channel: ChannelConfig, stream0: int = 0) -> List[SymbolFrame]:
        """Pass each frame's kept symbols through the AWGN channel."""
        return [f.with_payload(awgn(f.kept, channel, stream=stream0 + k)) for k, f in enumerate(frames)]

    @torch.no_grad()
    def decode(self, frames: List[SymbolFrame]) -> torch.Tensor:
        """Zero-pad received frames and run the SCD; returns ``(B, D)``."""
        cfg = self.cfg
        padded, q_norm = [], []
        for f in frames:
            if f.quant is None:
                p = torch.zeros(cfg.n_symbols, dtype=f.kept.dtype)
                p[: f.n_kept] = f.kept
                q_norm.append(f.n_kept / cfg.n_symbols)
            else:
                p = zero_pad(f.kept, f.quant, cfg.n_symbols, cfg.levels)
                q_norm.append(f.quant / (cfg.levels - 1))
            padded.append(p)
        p = torch.stack(padded)
        return self.decode_symbols(p, torch.tensor(q_norm, dtype=p.dtype))
