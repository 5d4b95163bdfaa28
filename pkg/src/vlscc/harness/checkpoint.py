"""Versioned checkpoint container shared by both codecs."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch
from torch import nn

from vlscc.codec1d import Codec1DConfig, VLSCC1D
from vlscc.codec2d import Codec2DConfig, VLSCC2D

__all__ = ["FORMAT", "VERSION", "save_checkpoint", "load_checkpoint", "build_codec", "CheckpointError"]

FORMAT = "vlscc-checkpoint"
VERSION = 1

Codec = Union[VLSCC1D, VLSCC2D]


class CheckpointError(ValueError):
    pass


def _kind(model: nn.Module) -> str:
    if isinstance(model, VLSCC1D):
        return "codec1d"
    if isinstance(model, VLSCC2D):
        return "codec2d"
    raise TypeError(f"not a codec: {type(model).__name__}")


def build_codec(kind: str, codec_config: Dict[str, Any]) -> Codec:
    if kind == "codec1d":
        return VLSCC1D(Codec1DConfig(**codec_config))
    if kind == "codec2d":
        return VLSCC2D(Codec2DConfig(**codec_config))
    raise CheckpointError(f"unknown codec kind {kind!r}")


def save_checkpoint(path, model: Codec, *, run_config: Optional[dict] = None, step: int = 0,
                    epoch: int = 0, optimizer: Optional[torch.optim.Optimizer] = None,
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write ``model`` (plus optional training state) to ``path`` atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format": FORMAT,
        "version": VERSION,
        "kind": _kind(model),
        "codec_config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "run_config": run_config,
        "step": int(step),
        "epoch": int(epoch),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Dict[str, Any]:
    """Load a checkpoint; the returned dict gains a ``model`` entry."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if blob.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('version')}")
    model = build_codec(blob["kind"], blob["codec_config"])
    dtype = next(iter(blob["state_dict"].values())).dtype
    model.to(dtype)
    model.load_state_dict(blob["state_dict"])
    blob["model"] = model
    return blob
