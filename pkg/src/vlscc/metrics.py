"""Evaluation metrics and symbol-budget accounting."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np
import torch

__all__ = ["psnr", "mpjpe", "spp", "mask_density"]


def _as_array(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(x, y, peak: float = 1.0) -> float:
    """PSNR in dB for images in ``[0, peak]``; ``inf`` when the images match."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def mpjpe(truth, est) -> float:
    """Mean per-joint position error over ``(M, K, 3)`` joint sets.

    A single ``(K, 3)`` set is treated as ``M = 1``.
    """
    a, b = _as_array(truth), _as_array(est)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ValueError(f"expected (M, K, 3) joints, got {a.shape}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise ValueError("empty joint set")
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def spp(total_real_symbols, height: int, width: int) -> float:
    """Complex symbols per pixel: ``(real_symbols / 2) / (H W)``."""
    if height <= 0 or width <= 0:
        raise ValueError("image dimensions must be positive")
    return (total_real_symbols / 2.0) / (height * width)


def mask_density(masks: Iterable) -> float:
    """Average kept fraction over a collection of masks (any shapes)."""
    kept = 0.0
    total = 0
    count = 0
    for m in masks:
        a = _as_array(m)
        kept += float(a.sum())
        total += a.size
        count += 1
    if count == 0:
        raise ValueError("mask_density needs at least one mask")
    return kept / total if total else 0.0
