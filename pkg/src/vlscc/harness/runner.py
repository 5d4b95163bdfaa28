"""Training, evaluation, sweeps and baselines."""
from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image
from torch import nn

from vlscc import losses, metrics, ratequant
from vlscc.channel import ChannelConfig, awgn, sidelink_bpp
from vlscc.codec1d import VLSCC1D, mlp
from vlscc.codec2d import VLSCC2D
from vlscc.datasrc import ImageFolderStream, gen_procedural_images, gen_vectors
from vlscc.harness.checkpoint import build_codec, load_checkpoint, save_checkpoint
from vlscc.harness.config import RunConfig, save_config
from vlscc.harness.metrics_log import MetricsLog
from vlscc.sidelink import sidelink_decode, sidelink_encode

log = logging.getLogger(__name__)

__all__ = [
    "TrainingDiverged",
    "TrainResult",
    "train",
    "evaluate",
    "sweep",
    "select_gamma",
    "fixed_length_baseline",
    "export_rate_maps",
    "make_codec",
]

# stream tags for seed derivation
_TRAIN, _VAL, _EVAL, _RANDOM_RATE = 1, 2, 3, 4
_VAL_NOISE_STREAM = 2**31 - 1


class TrainingDiverged(RuntimeError):
    pass


def _derive(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


class _FolderSampler:
    """In-memory images from a folder, sampled by seeded random crop and flip."""

    def __init__(self, path, patch_size: int):
        stream = ImageFolderStream(Path(path), patch_size=patch_size)
        self.images = [im for im in map(stream._load, stream.files)
                       if im is not None and min(im.shape[:2]) >= patch_size]
        if not self.images:
            raise ValueError(f"no usable images in {path}")
        self.patch_size = patch_size

    def sample(self, n: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        ps = self.patch_size
        out = np.empty((n, ps, ps, 3))
        for k in range(n):
            img = self.images[int(rng.integers(len(self.images)))]
            top = int(rng.integers(0, img.shape[0] - ps + 1))
            left = int(rng.integers(0, img.shape[1] - ps + 1))
            patch = img[top: top + ps, left: left + ps]
            out[k] = patch[:, ::-1] if rng.random() < 0.5 else patch
        return out


class _Data:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.folder = None
        if cfg.task == "vector":
            self.spec = cfg.mixture()
        elif cfg.data.get("source", "procedural") == "folder":
            self.folder = _FolderSampler(cfg.data["path"], cfg.image_size)

    def batch(self, n: int, seed: int, dtype=torch.float32):
        """Returns ``(tensor, aux)``; aux is component labels or texture maps."""
        cfg = self.cfg
        if cfg.task == "vector":
            x, labels = gen_vectors(n, self.spec, seed)
            return torch.as_tensor(x, dtype=dtype), labels
        if self.folder is not None:
            imgs, aux = self.folder.sample(n, seed), None
        else:
            size = cfg.image_size
            imgs, aux = gen_procedural_images(n, size, size, seed, cfg.data.get("template", "half"),
                                              int(cfg.data.get("cell", 4)))
        return torch.as_tensor(imgs, dtype=dtype).permute(0, 3, 1, 2).contiguous(), aux


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def make_codec(cfg: RunConfig) -> Union[VLSCC1D, VLSCC2D]:
    return build_codec("codec1d" if cfg.task == "vector" else "codec2d", cfg.codec_config().to_dict())


class _Discriminator(nn.Module):
    def __init__(self, dim: int, hidden: int, seed: int):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = mlp(dim, 1, hidden, 3)

    def forward(self, x):
        return torch.sigmoid(self.net(x)).squeeze(-1)


@dataclass
class TrainResult:
    model: nn.Module
    output_dir: Path
    last: Path
    best: Path
    log_path: Path


class _Trainer:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.model = make_codec(cfg)
        self.data = _Data(cfg)
        self.channel = cfg.train_channel()
        ran = list(self.model.ran.parameters()) if self.model.ran is not None else []
        ran_ids = {id(p) for p in ran}
        rest = [p for p in self.model.parameters() if id(p) not in ran_ids]
        groups = [{"params": rest}]
        if ran:
            groups.append({"params": ran, "lr": cfg.lr * cfg.ran_lr_scale})
        self.opt = torch.optim.Adam(groups, lr=cfg.lr)
        self.disc = self.disc_opt = None
        self.extractor = None
        if cfg.lam > 0 and cfg.task == "vector":
            ccfg = self.model.cfg
            self.disc = _Discriminator(ccfg.dim, min(ccfg.hidden, 256), _derive(cfg.seed, 7))
            self.disc_opt = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr)
        if cfg.task == "image":
            self.extractor = losses.RandomConvPyramid(losses.PerceptualExtractorSpec(**cfg.perceptual))

    def gamma_at(self, step: int) -> float:
        return 0.0 if step < self.cfg.gamma_warmup_steps else self.cfg.gamma

    def losses(self, x: torch.Tensor, out, gamma: float):
        """Returns ``(total, distortion, rate, semantic)`` for one batch."""
        cfg = self.cfg
        x_hat = out.x_hat if cfg.task == "vector" else out.image_hat
        distortion = losses.l2_distortion(x_hat, x)
        if cfg.task == "vector":
            rate = losses.rate_loss_1d(out.rate).mean() if out.rate is not None else x.new_zeros(())
        else:
            rate = losses.rate_loss_2d(out.rate_map).mean() if out.rate_map is not None else x.new_zeros(())
        semantic = x.new_zeros(())
        if cfg.lam > 0:
            if self.disc is not None:
                semantic = losses.lsgan_generator_loss(self.disc(x_hat))
            else:
                semantic = losses.perceptual_distance(x_hat, x, self.extractor).mean()
        weights = losses.LossWeights(gamma=gamma, lam=cfg.lam)
        return losses.total_loss(distortion, rate, weights, semantic), distortion, rate, semantic

    def random_quant(self, x: torch.Tensor, step: int) -> Optional[torch.Tensor]:
        """Uniform random levels during the random-rate warm-up, else ``None``.

        Training every prefix length before the rate network takes over gives
        the symbols an importance ordering; without it an untrained decoder
        makes the mask gradient prune all symbols, and pruned symbols never
        receive gradient again. With ``random_rate_every = k`` every k-th step
        after the warm-up is a random-rate step too, so the decoder stays good
        at rates the rate network currently avoids.
        """
        ccfg = self.model.cfg
        if not ccfg.rate_allocation or ccfg.fixed_symbols is not None:
            return None
        every = self.cfg.random_rate_every
        if step >= self.cfg.random_rate_steps and not (every and step % every == 0):
            return None
        shape = (x.shape[0],) if self.cfg.task == "vector" else (x.shape[0], x.shape[-2] // 16, x.shape[-1] // 16)
        gen = torch.Generator().manual_seed(_derive(self.cfg.seed, _RANDOM_RATE, step))
        return torch.randint(0, ccfg.levels, shape, generator=gen)

    def step(self, step: int) -> float:
        cfg = self.cfg
        x, _ = self.data.batch(cfg.batch_size, _derive(cfg.seed, _TRAIN, step))
        x = x.to(next(self.model.parameters()).dtype)
        self.model.train()
        out = self.model(x, channel=lambda z: awgn(z, self.channel, stream=step), quant=self.random_quant(x, step))
        total, distortion, rate, semantic = self.losses(x, out, self.gamma_at(step))
        if not torch.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: distortion={distortion.item()}, "
                f"rate={rate.item()}, semantic={semantic.item()}")
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        if self.disc is not None:
            x_hat = out.x_hat.detach()
            d_loss = losses.lsgan_discriminator_loss(self.disc(x), self.disc(x_hat))
            self.disc_opt.zero_grad()
            d_loss.backward()
            self.disc_opt.step()
        return total.item()

    @torch.no_grad()
    def validate(self) -> Dict:
        cfg = self.cfg
        self.model.eval()
        x, _ = self.data.batch(cfg.val_samples, _derive(cfg.seed, _VAL))
        x = x.to(next(self.model.parameters()).dtype)
        out = self.model(x, channel=lambda z: awgn(z, self.channel, stream=_VAL_NOISE_STREAM))
        total, distortion, rate, _ = self.losses(x, out, cfg.gamma)
        kept = out.mask.flatten(1).sum(1)
        row = {
            "distortion": float(distortion),
            "mean_kept_symbols": float(kept.mean()),
            "mask_density": float(out.mask.mean()),
            "loss": float(total),
        }
        r = out.rate if cfg.task == "vector" else out.rate_map
        if r is not None:
            row["mean_rate"] = float(r.mean())
        if cfg.task == "image":
            row["spp"] = metrics.spp(float(kept.mean()), x.shape[-2], x.shape[-1])
        return row

    def state(self) -> Dict:
        extra = {}
        if self.disc is not None:
            extra["discriminator"] = self.disc.state_dict()
            extra["discriminator_optimizer"] = self.disc_opt.state_dict()
        return extra

    def restore(self, blob: Dict) -> None:
        self.model.load_state_dict(blob["state_dict"])
        if blob.get("optimizer") is not None:
            self.opt.load_state_dict(blob["optimizer"])
        extra = blob.get("extra") or {}
        if self.disc is not None and "discriminator" in extra:
            self.disc.load_state_dict(extra["discriminator"])
            self.disc_opt.load_state_dict(extra["discriminator_optimizer"])


@contextmanager
def _flush_denormal():
    # masked-out symbols drive many activations and Adam moments towards zero;
    # denormal arithmetic then slows CPU backward passes several fold
    for t in (np.float32, np.float64):
        np.finfo(t).smallest_subnormal  # cache limits before numpy sees them flushed
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def train(cfg: RunConfig, resume: Optional[Union[str, Path]] = None) -> TrainResult:
    """Train one codec; writes ``last.pt``, ``best.pt`` and ``metrics.csv``.

    With ``resume`` (a ``last.pt`` path) training continues after the saved
    epoch; since batches and channel noise are derived from ``(seed, step)``,
    the continuation matches an uninterrupted run.
    """
    with _flush_denormal():
        return _train(cfg, resume)


def _train(cfg: RunConfig, resume) -> TrainResult:
    out_dir = cfg.output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.yaml")
    trainer = _Trainer(cfg)
    log_path = out_dir / "metrics.csv"
    last, best = out_dir / "last.pt", out_dir / "best.pt"
    start_epoch, best_val = 0, math.inf
    if resume is not None:
        blob = torch.load(Path(resume), map_location="cpu", weights_only=True)
        trainer.restore(blob)
        start_epoch = int(blob["epoch"])
        best_val = float((blob.get("extra") or {}).get("best_val", math.inf))
    elif log_path.exists():
        log_path.unlink()
    mlog = MetricsLog(log_path)
    run_cfg = cfg.to_dict()

    def checkpoint(path, epoch):
        extra = {**trainer.state(), "best_val": best_val}
        save_checkpoint(path, trainer.model, run_config=run_cfg, step=epoch * cfg.steps_per_epoch,
                        epoch=epoch, optimizer=trainer.opt, extra=extra)

    if cfg.epochs == 0 or resume is None:
        checkpoint(last, start_epoch)
        if not best.exists() or resume is None:
            checkpoint(best, start_epoch)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        loss = math.nan
        for s in range((epoch - 1) * cfg.steps_per_epoch, epoch * cfg.steps_per_epoch):
            loss = trainer.step(s)
        row = trainer.validate()
        log.info("%s epoch %d: train loss %.5g, val distortion %.5g, kept %.1f",
                 cfg.run_id, epoch, loss, row["distortion"], row["mean_kept_symbols"])
        mlog.append({
            "run_id": cfg.run_id, "phase": "val", "epoch": epoch, "step": epoch * cfg.steps_per_epoch,
            "snr_db": cfg.train_snr_db, "gamma": cfg.gamma, "lambda": cfg.lam, "seed": cfg.seed,
            "n_samples": cfg.val_samples, **row,
        })
        improved = row["distortion"] < best_val
        if improved:
            best_val = row["distortion"]
        checkpoint(last, epoch)
        if improved:
            checkpoint(best, epoch)
    return TrainResult(trainer.model, out_dir, last, best, log_path)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _sidelink_bits(frames, levels: int):
    """One packet per sample; returns mean total and payload bits."""
    total = payload = 0
    for f in frames:
        q = np.atleast_1d(np.asarray(f.quant, dtype=np.int64))
        packet = sidelink_encode(f.quant, levels)
        if not np.array_equal(sidelink_decode(packet.to_bytes()).reshape(q.shape), q):
            raise RuntimeError("side link round trip failed")
        total += packet.total_bits
        payload += packet.payload_bits
    n = len(frames)
    return total / n, payload / n


@torch.no_grad()
def evaluate(checkpoint, cfg: Optional[RunConfig] = None, snr_list: Optional[Sequence[float]] = None,
             seeds: Optional[Sequence[int]] = None, n_samples: Optional[int] = None) -> List[Dict]:
    """Evaluate with physical shortening; one row per (snr, seed).

    ``checkpoint`` is a path or a loaded codec. Missing arguments default to
    the run configuration stored in the checkpoint.
    """
    if isinstance(checkpoint, nn.Module):
        model = checkpoint
        if cfg is None:
            raise ValueError("a RunConfig is required when passing a model")
    else:
        blob = load_checkpoint(checkpoint)
        model = blob["model"]
        if cfg is None:
            if not blob.get("run_config"):
                raise ValueError("checkpoint carries no run configuration")
            cfg = RunConfig.from_dict(blob["run_config"])
    kind = "vector" if isinstance(model, VLSCC1D) else "image"
    if kind != cfg.task:
        raise ValueError(f"checkpoint holds a {kind} codec but the config task is {cfg.task!r}")
    snr_list = list(cfg.eval_snr_db if snr_list is None else snr_list)
    seeds = list(cfg.eval_seeds if seeds is None else seeds)
    n = cfg.eval_samples if n_samples is None else n_samples
    if not snr_list or not seeds:
        raise ValueError("need at least one SNR and one seed")
    model.eval()
    dtype = next(model.parameters()).dtype
    ccfg = model.cfg
    data = _Data(cfg)
    extractor = losses.RandomConvPyramid(losses.PerceptualExtractorSpec(**cfg.perceptual)).to(dtype) \
        if kind == "image" else None
    per_seed = {}
    for seed in seeds:
        x, _ = data.batch(n, _derive(seed, _EVAL), dtype=dtype)
        frames = model.encode(x)
        row = {"n_samples": n}
        if ccfg.rate_allocation:
            if kind == "vector":
                rate = model.rate_index(x)
            else:
                rate = model.rate_map(model.semantic_encode(x))
            row["mean_rate"] = float(rate.mean())
            bits, payload = _sidelink_bits(frames, ccfg.levels)
        else:
            bits = payload = 0.0
        kept = np.array([f.n_kept for f in frames], dtype=np.float64)
        row.update(mean_kept_symbols=float(kept.mean()),
                   mask_density=metrics.mask_density(f.mask for f in frames),
                   sidelink_bits=bits, sidelink_payload_bits=payload)
        if kind == "image":
            h, w = x.shape[-2:]
            row.update(spp=metrics.spp(float(kept.mean()), h, w), sidelink_bpp=bits / (h * w),
                       sidelink_fixed_bpp=sidelink_bpp(h, w, ccfg.levels) if ccfg.rate_allocation else 0.0)
        per_seed[seed] = (x, frames, row)
    rows = []
    for snr in snr_list:
        for seed in seeds:
            x, frames, base = per_seed[seed]
            channel = ChannelConfig(snr, seed)
            x_hat = model.decode(model.transmit(frames, channel))
            row = {"run_id": cfg.run_id, "phase": "eval", "snr_db": snr, "gamma": cfg.gamma,
                   "lambda": cfg.lam, "seed": seed, **base,
                   "distortion": float(losses.l2_distortion(x_hat, x))}
            if kind == "image":
                row["psnr"] = float(np.mean([metrics.psnr(a, b) for a, b in zip(x, x_hat)]))
                row["lpips"] = float(losses.perceptual_distance(x_hat, x, extractor).mean())
            elif ccfg.dim % 3 == 0:
                row["mpjpe"] = metrics.mpjpe(x.reshape(n, -1, 3), x_hat.reshape(n, -1, 3))
            rows.append(row)
    return rows


def _train_and_eval(cfg: RunConfig) -> List[Dict]:
    result = train(cfg)
    rows = evaluate(result.last, cfg)
    MetricsLog(result.output_dir / "eval.csv").extend(rows)
    return rows


def sweep(cfg: RunConfig, axis: str, values: Sequence[float], workers: int = 1) -> List[Dict]:
    """Train and evaluate one run per axis value (``gamma`` or ``snr``).

    Sub-runs live under ``<output_dir>/<axis>-<value>``; the merged evaluation
    rows are written to ``<output_dir>/sweep.csv`` and returned.
    """
    if not values:
        raise ValueError("sweep axis is empty")
    if axis not in ("gamma", "snr"):
        raise ValueError(f"axis must be 'gamma' or 'snr', got {axis!r}")
    subs = []
    for v in values:
        name = f"{cfg.run_id}/{axis}-{v:g}"
        if axis == "gamma":
            subs.append(cfg.replace(run_id=name, gamma=float(v)))
        else:
            subs.append(cfg.replace(run_id=name, train_snr_db=float(v), eval_snr_db=[float(v)]))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_and_eval, subs))
    else:
        results = [_train_and_eval(c) for c in subs]
    rows = [r for rs in results for r in rs]
    path = cfg.output_dir() / "sweep.csv"
    if path.exists():
        path.unlink()
    MetricsLog(path).extend(rows)
    return rows


def select_gamma(budget: float, rows: Sequence[Dict]) -> float:
    """Pick the gamma whose mean kept symbols is largest while within ``budget``."""
    by_gamma: Dict[float, List[float]] = {}
    for r in rows:
        if r.get("phase", "eval") != "eval":
            continue
        by_gamma.setdefault(float(r["gamma"]), []).append(float(r["mean_kept_symbols"]))
    feasible = {g: float(np.mean(v)) for g, v in by_gamma.items() if np.mean(v) <= budget}
    if not feasible:
        raise ValueError(f"no sweep point meets the budget of {budget} symbols")
    return max(feasible, key=lambda g: (feasible[g], -g))


def fixed_length_baseline(cfg: RunConfig, n_symbols: int, run_id: Optional[str] = None):
    """Train and evaluate the codec without rate allocation, sending ``n_symbols``."""
    n_max = cfg.codec_config().n_symbols
    if not 0 < n_symbols <= n_max:
        raise ValueError(f"n_symbols must be in [1, {n_max}], got {n_symbols}")
    base = cfg.with_codec(rate_allocation=False, fixed_symbols=int(n_symbols)).replace(
        run_id=run_id or f"{cfg.run_id}-fixed{n_symbols}", gamma=0.0, gamma_warmup_steps=0)
    result = train(base)
    rows = evaluate(result.last, base)
    MetricsLog(result.output_dir / "eval.csv").extend(rows)
    return result, rows


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


@torch.no_grad()
def export_rate_maps(checkpoint, out_path, n: int = 16, seed: int = 0, cols: int = 4,
                     scale: int = 16) -> Path:
    """Image codec: grayscale grid of rate maps. Vector codec: per-sample CSV."""
    blob = load_checkpoint(checkpoint)
    model, cfg = blob["model"], RunConfig.from_dict(blob["run_config"])
    if not model.cfg.rate_allocation:
        raise ValueError("fixed-length codec has no rate maps")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    x, aux = _Data(cfg).batch(n, _derive(seed, _EVAL), dtype=dtype)
    if isinstance(model, VLSCC1D):
        r_t = model.rate_index(x)
        # float32 sigmoids can saturate to exactly 0 or 1; the tensor path clamps
        q = ratequant.quantize_ste(r_t, model.cfg.levels).to(torch.int64).numpy()
        r = r_t.numpy()
        kept = ratequant.mask_popcount(q, model.cfg.n_symbols, model.cfg.levels)
        lines = ["sample,label,rate,level,kept"]
        lines += [f"{k},{int(aux[k])},{r[k]!r},{int(q[k])},{int(kept[k])}" for k in range(n)]
        out_path.write_text("\n".join(lines) + "\n")
        return out_path
    maps = model.rate_map(model.semantic_encode(x)).numpy()
    h2, w2 = maps.shape[1:]
    rows = math.ceil(n / cols)
    grid = np.zeros((rows * (h2 * scale + 1) + 1, cols * (w2 * scale + 1) + 1), dtype=np.uint8)
    for k, m in enumerate(maps):
        tile = np.kron(np.round(m * 255).astype(np.uint8), np.ones((scale, scale), dtype=np.uint8))
        r0, c0 = 1 + (k // cols) * (h2 * scale + 1), 1 + (k % cols) * (w2 * scale + 1)
        grid[r0: r0 + h2 * scale, c0: c0 + w2 * scale] = tile
    Image.fromarray(grid, mode="L").save(out_path)
    return out_path
