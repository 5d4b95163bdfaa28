"""Uniform rate quantizer and prefix rate masks with straight-through gradients.

The discrete forward operations (level quantization, prefix mask generation)
are exact; training flows through them via two surrogate gradients:

* the quantizer passes ``upstream * (L - 1)`` back to the continuous rate;
* each mask bit ``m_i`` passes ``1/3`` back to the level ``q`` when ``q`` lies
  in the three-unit window ``ceil((L-1) i / N) - 2 < q <= ceil((L-1) i / N) + 1``.

Plain functions operate on Python ints/floats or NumPy arrays and serve as the
reference semantics; ``quantize_ste`` / ``rate_mask`` are the autograd-aware
torch versions used inside the codecs.
"""
from __future__ import annotations

import numpy as np
import torch

__all__ = [
    "quantize",
    "quantize_backward",
    "make_mask",
    "mask_backward",
    "mask_gradient_weights",
    "make_mask_tensor",
    "mask_popcount",
    "quantize_ste",
    "rate_mask",
    "QuantizeSTE",
    "RateMaskSTE",
]

WINDOW_WEIGHT = 1.0 / 3.0


def _check_levels(levels: int) -> None:
    if int(levels) != levels or levels < 2:
        raise ValueError(f"level count must be an integer >= 2, got {levels!r}")


def _ceil_div(a, b):
    # exact integer ceil(a / b) for b > 0
    return -((-a) // b)


def _two_product(a, b, split: float):
    """Error-free product: ``a * b == p + e`` exactly (Dekker, no FMA needed)."""
    p = a * b
    c = split * a
    ah = c - (c - a)
    al = a - ah
    c = split * b
    bh = c - (c - b)
    bl = b - bh
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


def _levels_exact(r, levels: int, split: float, ceil, where):
    # x = r (L-1) is rounded; since k + 1/2 is representable and rounding is
    # monotone, x only misjudges a tie when it lands exactly on k + 1/2, and
    # the sign of the rounding error then decides
    x, e = _two_product(r, r * 0 + (levels - 1), split)
    lo = ceil(x - 0.5)
    on_boundary = (x - 0.5) == lo
    return where(on_boundary & (e > 0), lo + 1, lo)


def quantize(r, levels: int):
    """Map a rate index in (0, 1) to an integer level in ``[0, levels-1]``.

    Half-way values go to the lower level, i.e. ``ceil(r*(L-1) - 0.5)``
    evaluated exactly (no rounding of the product can flip a near-tie).
    Accepts a scalar (returns ``int``) or an array (returns ``int64`` array).
    """
    _check_levels(levels)
    arr = np.asarray(r, dtype=np.float64)
    if arr.size and (np.any(~np.isfinite(arr)) or np.any(arr <= 0.0) or np.any(arr >= 1.0)):
        raise ValueError("rate index must lie strictly inside (0, 1)")
    q = np.clip(_levels_exact(arr, levels, 134217729.0, np.ceil, np.where), 0, levels - 1).astype(np.int64)
    if np.ndim(r) == 0:
        return int(q)
    return q


def quantize_backward(upstream, levels: int):
    """Straight-through gradient of :func:`quantize`: ``upstream * (L - 1)``."""
    _check_levels(levels)
    return upstream * (levels - 1)


def _check_q(q, levels: int) -> np.ndarray:
    qa = np.asarray(q)
    if qa.size and (np.any(qa != np.round(qa)) or np.any(qa < 0) or np.any(qa > levels - 1)):
        raise ValueError(f"quant level out of range [0, {levels - 1}]")
    return qa.astype(np.int64)


def mask_popcount(q, n_symbols: int, levels: int):
    """Number of ones in the mask of level ``q``: ``ceil(N q / (L - 1))``."""
    _check_levels(levels)
    qa = _check_q(q, levels)
    out = _ceil_div(n_symbols * qa, levels - 1)
    return int(out) if np.ndim(q) == 0 else out


def make_mask(q, n_symbols: int, levels: int) -> np.ndarray:
    """Prefix mask of length ``n_symbols``; bit ``i`` is set iff ``i < N q / (L-1)``.

    ``q`` may be an array, in which case the mask axis is appended last.
    """
    _check_levels(levels)
    if n_symbols < 1:
        raise ValueError("n_symbols must be >= 1")
    qa = _check_q(q, levels)
    i = np.arange(n_symbols, dtype=np.int64)
    # i < N q / (L-1)  <=>  i (L-1) < N q, kept in integers
    return (i * (levels - 1) < n_symbols * qa[..., None]).astype(np.uint8)


def make_mask_tensor(quant_map, n_symbols: int, levels: int) -> np.ndarray:
    """Per-location masks for a 2D quant map: ``(H2, W2) -> (H2, W2, N)``."""
    qm = np.asarray(quant_map)
    if qm.ndim != 2:
        raise ValueError(f"quant map must be 2-D, got shape {qm.shape}")
    return make_mask(qm, n_symbols, levels)


def mask_gradient_weights(q, n_symbols: int, levels: int) -> np.ndarray:
    """Surrogate derivative of each mask bit wrt the level (1/3 inside the window)."""
    _check_levels(levels)
    qa = np.asarray(q, dtype=np.float64)
    i = np.arange(n_symbols, dtype=np.int64)
    centre = _ceil_div((levels - 1) * i, n_symbols).astype(np.float64)
    inside = (centre - 2 < qa[..., None]) & (qa[..., None] <= centre + 1)
    return np.where(inside, WINDOW_WEIGHT, 0.0)


def mask_backward(upstream, q, n_symbols: int, levels: int):
    """Gradient reaching ``q`` from a mask-shaped upstream gradient."""
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape[-1] != n_symbols:
        raise ValueError(f"upstream last axis must have length {n_symbols}")
    out = np.sum(up * mask_gradient_weights(q, n_symbols, levels), axis=-1)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# torch autograd versions
# ---------------------------------------------------------------------------


class QuantizeSTE(torch.autograd.Function):
    """Forward: exact level (as float). Backward: ``grad * (L - 1)``."""

    @staticmethod
    def forward(ctx, r, levels):
        ctx.levels = levels
        rd = r.detach().to(torch.float64)
        q = _levels_exact(rd, levels, 134217729.0, torch.ceil, torch.where)
        return q.clamp(0, levels - 1).to(r.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output * (ctx.levels - 1), None


class RateMaskSTE(torch.autograd.Function):
    """Forward: prefix mask, last axis of length N. Backward: 1/3 window rule."""

    @staticmethod
    def forward(ctx, q, n_symbols, levels):
        i = torch.arange(n_symbols, device=q.device, dtype=torch.int64)
        qi = q.detach().round().to(torch.int64)
        mask = (i * (levels - 1) < n_symbols * qi.unsqueeze(-1)).to(q.dtype)
        centre = torch.div(-(levels - 1) * i, n_symbols, rounding_mode="floor").neg().to(q.dtype)
        qe = q.detach().unsqueeze(-1)
        weights = ((centre - 2 < qe) & (qe <= centre + 1)).to(q.dtype) * WINDOW_WEIGHT
        ctx.save_for_backward(weights)
        return mask

    @staticmethod
    def backward(ctx, grad_output):
        (weights,) = ctx.saved_tensors
        return (grad_output * weights).sum(-1), None, None


def quantize_ste(r: torch.Tensor, levels: int) -> torch.Tensor:
    """Differentiable :func:`quantize` on a tensor of rate indices."""
    _check_levels(levels)
    return QuantizeSTE.apply(r, levels)


def rate_mask(q: torch.Tensor, n_symbols: int, levels: int) -> torch.Tensor:
    """Differentiable :func:`make_mask`; output shape is ``q.shape + (N,)``."""
    _check_levels(levels)
    return RateMaskSTE.apply(q, n_symbols, levels)
