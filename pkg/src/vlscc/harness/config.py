"""Run configuration: validation and loading from YAML / JSON files."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml

from vlscc.channel import ChannelConfig
from vlscc.codec1d import Codec1DConfig
from vlscc.codec2d import Codec2DConfig
from vlscc.datasrc import TEMPLATES, MixtureSpec
from vlscc.losses import LossWeights

__all__ = ["RunConfig", "load_config", "save_config", "OUTPUT_ROOT_ENV", "TASKS"]

OUTPUT_ROOT_ENV = "VLSCC_OUTPUT_ROOT"
TASKS = ("vector", "image")


def _default_data(task: str) -> Dict[str, Any]:
    if task == "vector":
        return {"dim": 64, "components": [{"weight": 0.5, "intrinsic_dim": 4},
                                          {"weight": 0.5, "intrinsic_dim": 48}]}
    return {"source": "procedural", "template": "half", "size": 64}


@dataclass
class RunConfig:
    """Everything needed to train and evaluate one codec.

    ``codec`` holds :class:`Codec1DConfig` (task ``vector``) or
    :class:`Codec2DConfig` (task ``image``) fields. ``data`` is a mixture spec
    for vectors, or ``{"source": "procedural", "template", "size"}`` /
    ``{"source": "folder", "path", "patch_size"}`` for images.
    """

    task: str = "vector"
    run_id: str = "run"
    codec: Dict[str, Any] = field(default_factory=dict)
    data: Dict[str, Any] = field(default_factory=dict)
    train_snr_db: float = 10.0
    eval_snr_db: List[float] = field(default_factory=lambda: [10.0])
    gamma: float = 0.0
    lam: float = 0.0
    gamma_warmup_steps: int = 0
    random_rate_steps: int = 0
    random_rate_every: int = 0
    lr: float = 1e-4
    ran_lr_scale: float = 1.0
    batch_size: int = 64
    epochs: int = 10
    steps_per_epoch: int = 100
    val_samples: int = 256
    eval_samples: int = 1000
    budget: Optional[float] = None
    seed: int = 0
    eval_seeds: List[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    perceptual: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.data:
            self.data = _default_data(self.task)
        self.validate()

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        parts = self.run_id.split("/")
        if not self.run_id or self.run_id.startswith("/") or any(p in ("", ".", "..") for p in parts):
            raise ValueError(f"run_id must be a relative name, got {self.run_id!r}")
        self.codec_config()
        self.loss_weights()
        ChannelConfig(self.train_snr_db, self.seed)
        for snr in self.eval_snr_db:
            ChannelConfig(snr, self.seed)
        if not self.eval_snr_db:
            raise ValueError("eval_snr_db must not be empty")
        if not self.eval_seeds:
            raise ValueError("eval_seeds must not be empty")
        if self.lr <= 0 or self.ran_lr_scale <= 0:
            raise ValueError("learning rates must be positive")
        for name in ("batch_size", "steps_per_epoch", "val_samples", "eval_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if min(self.epochs, self.gamma_warmup_steps, self.random_rate_steps, self.random_rate_every) < 0:
            raise ValueError("epochs and warm-up step counts must be >= 0")
        if self.budget is not None and self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.task == "vector":
            spec = self.mixture()
            if spec.dim != self.codec_config().dim:
                raise ValueError(f"data dim {spec.dim} != codec dim {self.codec_config().dim}")
        else:
            src = self.data.get("source", "procedural")
            if src == "procedural":
                size = int(self.data.get("size", 64))
                if size % 16 or size <= 0:
                    raise ValueError("procedural image size must be a positive multiple of 16")
                if int(self.data.get("cell", 4)) < 1:
                    raise ValueError("texture cell size must be >= 1")
                if self.data.get("template", "half") not in TEMPLATES:
                    raise ValueError(f"unknown template {self.data.get('template')!r}")
            elif src == "folder":
                if "path" not in self.data:
                    raise ValueError("folder data source needs a 'path'")
                if int(self.data.get("patch_size", 128)) % 16:
                    raise ValueError("patch_size must be a multiple of 16")
            else:
                raise ValueError(f"unknown image source {src!r}")

    # -- typed views -----------------------------------------------------

    def codec_config(self):
        cls = Codec1DConfig if self.task == "vector" else Codec2DConfig
        return cls(**self.codec)

    def loss_weights(self) -> LossWeights:
        return LossWeights(gamma=self.gamma, lam=self.lam)

    def mixture(self) -> MixtureSpec:
        return MixtureSpec.from_dict(self.data)

    def train_channel(self) -> ChannelConfig:
        return ChannelConfig(self.train_snr_db, self.seed)

    @property
    def image_size(self) -> int:
        if self.data.get("source", "procedural") == "folder":
            return int(self.data.get("patch_size", 128))
        return int(self.data.get("size", 64))

    def output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        base = Path(root) if root else Path(self.out_dir)
        return base / self.run_id

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_codec(self, **changes) -> "RunConfig":
        return self.replace(codec={**self.codec, **changes})

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path, overrides: Optional[Sequence[str]] = None) -> RunConfig:
    """Read a YAML or JSON config; ``overrides`` are ``key=value`` strings.

    Values in overrides are parsed as YAML, and dotted keys reach into
    ``codec`` / ``data`` (e.g. ``codec.n_symbols=32``).
    """
    text = Path(path).read_text()
    raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    raw = dict(raw or {})
    apply_overrides(raw, overrides or ())
    return RunConfig.from_dict(raw)


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
