"""Simulated transmission of masked symbol frames over an AWGN channel."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch

from vlscc import ratequant

__all__ = [
    "ChannelConfig",
    "SymbolFrame",
    "noise_variance",
    "normalize_power",
    "awgn",
    "gather_kept",
    "scatter_padded",
    "zero_pad",
    "sidelink_bpp",
    "complex_symbols",
]


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = 10.0
    seed: int = 0
    model: str = "awgn"

    def __post_init__(self):
        if self.model != "awgn":
            raise ValueError(f"unsupported channel model {self.model!r}")
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")

    @property
    def noise_var(self) -> float:
        return noise_variance(self.snr_db)


@dataclass
class SymbolFrame:
    """One transmitted unit: shortened symbols plus the side-link rate info.

    ``kept`` holds only the symbols whose mask bit is set, in gather order.
    ``quant`` is a scalar level (1D codec), an ``(H2, W2)`` level map (2D), or
    ``None`` for fixed-length frames that carry no side information.
    """

    kept: torch.Tensor
    mask: np.ndarray
    quant: Optional[Union[int, np.ndarray]]
    n_symbols: int
    levels: int
    shape: Tuple[int, ...] = field(default=())
    degenerate: bool = False

    def __post_init__(self):
        if self.kept.dim() != 1 or self.kept.numel() != int(np.sum(self.mask)):
            raise ValueError("kept payload length must equal the mask popcount")

    @property
    def n_kept(self) -> int:
        return int(self.kept.numel())

    @property
    def n_complex(self) -> float:
        return complex_symbols(self.n_kept)

    def with_payload(self, kept: torch.Tensor) -> "SymbolFrame":
        return replace(self, kept=kept)


def noise_variance(snr_db: float) -> float:
    """Per-symbol noise variance under unit average signal power."""
    return 10.0 ** (-snr_db / 10.0)


def complex_symbols(n_real) -> float:
    # consecutive real pairs count as one complex channel use
    return n_real / 2.0


def normalize_power(y: torch.Tensor, mask: torch.Tensor, frame_dims: int = 1,
                    return_degenerate: bool = False):
    """Scale kept symbols of each frame to unit mean square; zero the rest.

    The last ``frame_dims`` axes form one frame (1 for vectors, 3 for
    ``(N, H2, W2)`` symbol tensors); leading axes are batch. Frames with no kept
    symbols pass through unchanged.
    """
    if y.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(mask.shape)}")
    dims = tuple(range(-frame_dims, 0))
    count = mask.sum(dim=dims, keepdim=True)
    energy = (y * y * mask).sum(dim=dims, keepdim=True)
    degenerate = count.detach() == 0
    # guards keep the degenerate branch finite for autograd
    scale = torch.where(
        degenerate | (energy.detach() == 0),
        torch.ones_like(energy),
        torch.sqrt(count.clamp_min(1) / energy.clamp_min(1e-30)),
    )
    out = torch.where(degenerate, y, y * mask * scale)
    if return_degenerate:
        return out, degenerate.reshape(degenerate.shape[: y.dim() - frame_dims])
    return out


def _generator(seed: int, stream: int) -> torch.Generator:
    state = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(stream) & 0xFFFFFFFF]).generate_state(2)
    gen = torch.Generator()
    gen.manual_seed(int(state[0]) << 32 | int(state[1]))
    return gen


def awgn(z: torch.Tensor, cfg: ChannelConfig, stream: int = 0) -> torch.Tensor:
    """Add i.i.d. Gaussian noise of variance ``10^(-snr_db/10)`` to ``z``.

    The noise realization is a pure function of ``(cfg.seed, stream, z.shape)``.
    """
    gen = _generator(cfg.seed, stream)
    noise = torch.randn(z.shape, generator=gen, dtype=z.dtype)
    return z + math.sqrt(cfg.noise_var) * noise.to(z.device)


def gather_kept(y_masked: torch.Tensor, mask) -> torch.Tensor:
    """Flatten the symbols with mask 1, row-major over all axes.

    For a 2D frame pass ``(H2, W2, N)`` tensors: this yields spatial raster
    order, then channel order within each location.
    """
    m = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask, device=y_masked.device)
    if tuple(m.shape) != tuple(y_masked.shape):
        raise ValueError(f"shape mismatch: {tuple(y_masked.shape)} vs {tuple(m.shape)}")
    return y_masked[m.bool()]


def scatter_padded(received: torch.Tensor, quant, n_symbols: int, levels: int) -> torch.Tensor:
    """Inverse of :func:`gather_kept`: place symbols at their mask positions.

    ``quant`` is a scalar level or an ``(H2, W2)`` map; the output has shape
    ``(N,)`` or ``(H2, W2, N)`` with zeros at dropped positions.
    """
    mask = torch.as_tensor(ratequant.make_mask(quant, n_symbols, levels), device=received.device).bool()
    expected = int(mask.sum())
    if received.dim() != 1 or received.numel() != expected:
        raise ValueError(f"expected {expected} received symbols, got {received.numel()}")
    out = torch.zeros(mask.shape, dtype=received.dtype, device=received.device)
    return out.masked_scatter(mask, received)


def zero_pad(received: torch.Tensor, quant, n_symbols: int, levels: int,
             shape: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Restore a shortened frame to full length (see :func:`scatter_padded`)."""
    if shape is not None:
        qshape = np.shape(quant)
        if tuple(shape[: len(qshape)]) != tuple(qshape):
            raise ValueError(f"quant shape {qshape} does not match frame shape {tuple(shape)}")
    return scatter_padded(received, quant, n_symbols, levels)


def sidelink_bpp(height: int, width: int, levels: int) -> float:
    """Fixed-length side-link cost in bits per pixel for a /16 rate map."""
    if height % 16 or width % 16 or height <= 0 or width <= 0:
        raise ValueError(f"image size {height}x{width} must be positive multiples of 16")
    return (height // 16) * (width // 16) * math.log2(levels) / (height * width)
