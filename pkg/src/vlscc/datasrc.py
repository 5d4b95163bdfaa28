"""Desk-scale data sources.

* :func:`gen_vectors` draws from a mixture of low-rank Gaussian sources, so
  samples carry different amounts of information.
* :func:`gen_procedural_images` builds images from flat and textured regions
  with a known region map.
* :class:`ImageFolderStream` yields patches from a local image directory.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from vlscc.codec2d import center_crop16

log = logging.getLogger(__name__)

__all__ = [
    "MixtureComponent",
    "MixtureSpec",
    "gen_vectors",
    "gen_procedural_images",
    "ImageFolderStream",
    "load_image_folder",
    "TEMPLATES",
]


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    intrinsic_dim: int
    noise: float = 0.0


@dataclass(frozen=True)
class MixtureSpec:
    """Mixture of sources ``x = A_c z + noise * e`` with ``z ~ N(0, I_k)``.

    Each component's embedding ``A_c`` (orthonormal columns, ``dim x k``) is
    drawn from ``basis_seed`` so that training and evaluation draws share it.
    """

    dim: int
    components: Tuple[MixtureComponent, ...]
    basis_seed: int = 0

    def __post_init__(self):
        if not self.components:
            raise ValueError("mixture needs at least one component")
        w = [c.weight for c in self.components]
        if any(x < 0 for x in w) or not math.isclose(sum(w), 1.0, abs_tol=1e-9):
            raise ValueError("component weights must be non-negative and sum to 1")
        for c in self.components:
            if not 1 <= c.intrinsic_dim <= self.dim:
                raise ValueError(f"intrinsic dimension {c.intrinsic_dim} not in [1, {self.dim}]")
            if c.noise < 0:
                raise ValueError("noise scale must be non-negative")

    @classmethod
    def two_component(cls, dim: int = 64, low: int = 4, high: int = 48, noise: float = 0.0,
                      basis_seed: int = 0) -> "MixtureSpec":
        return cls(dim, (MixtureComponent(0.5, low, noise), MixtureComponent(0.5, high, noise)), basis_seed)

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        comps = tuple(MixtureComponent(**c) for c in d["components"])
        return cls(int(d["dim"]), comps, int(d.get("basis_seed", 0)))

    def bases(self) -> List[np.ndarray]:
        rng = np.random.default_rng(self.basis_seed)
        out = []
        for c in self.components:
            a = rng.standard_normal((self.dim, c.intrinsic_dim))
            qm, _ = np.linalg.qr(a)
            out.append(qm[:, : c.intrinsic_dim])
        return out


def gen_vectors(n: int, spec: MixtureSpec, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` samples; returns ``(x, labels)`` with shapes ``(n, D)`` and ``(n,)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    weights = np.array([c.weight for c in spec.components])
    labels = rng.choice(len(weights), size=n, p=weights)
    x = np.zeros((n, spec.dim))
    for c, (comp, basis) in enumerate(zip(spec.components, spec.bases())):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        z = rng.standard_normal((idx.size, comp.intrinsic_dim))
        x[idx] = z @ basis.T
        if comp.noise:
            x[idx] += comp.noise * rng.standard_normal((idx.size, spec.dim))
    return x, labels


# ---------------------------------------------------------------------------
# procedural images
# ---------------------------------------------------------------------------

TEMPLATES = ("half", "flat", "texture", "blocks")


def _texture(rng: np.random.Generator, h: int, w: int, cell: int = 4) -> np.ndarray:
    coarse = rng.uniform(0.1, 0.9, size=(h // cell + 1, w // cell + 1, 3))
    return np.repeat(np.repeat(coarse, cell, axis=0), cell, axis=1)[:h, :w]


def gen_procedural_images(n: int, height: int, width: int, seed: int,
                          template: str = "half", cell: int = 4) -> Tuple[np.ndarray, np.ndarray]:
    """Images ``(n, H, W, 3)`` in [0, 1] and boolean texture maps ``(n, H, W)``.

    Templates: ``half`` (left or right half textured, the rest one flat colour),
    ``flat``, ``texture`` (everything textured) and ``blocks`` (random 16x16
    blocks textured). Texture is a grid of independent random colours in
    ``cell x cell`` pixel squares, so a 16x16 block carries ``3 (16/cell)^2``
    free values.
    """
    if height % 16 or width % 16 or height <= 0 or width <= 0:
        raise ValueError(f"image size {height}x{width} must be positive multiples of 16")
    if cell < 1:
        raise ValueError("cell must be >= 1")
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}; choose from {TEMPLATES}")
    rng = np.random.default_rng(seed)
    imgs = np.empty((n, height, width, 3))
    regions = np.zeros((n, height, width), dtype=bool)
    for k in range(n):
        colour = rng.uniform(0.1, 0.9, size=3)
        tex = _texture(rng, height, width, cell)
        region = regions[k]
        if template == "half":
            if rng.random() < 0.5:
                region[:, : width // 2] = True
            else:
                region[:, width // 2:] = True
        elif template == "texture":
            region[:] = True
        elif template == "blocks":
            blocks = rng.random((height // 16, width // 16)) < 0.5
            region[:] = np.kron(blocks, np.ones((16, 16), dtype=bool)).astype(bool)
        imgs[k] = np.where(region[..., None], tex, colour)
    return np.clip(imgs, 0.0, 1.0), regions


# ---------------------------------------------------------------------------
# image folders
# ---------------------------------------------------------------------------

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".ppm", ".pgm", ".webp"}


@dataclass
class ImageFolderStream:
    """Restartable stream of ``(p, p, 3)`` float patches from a directory.

    Each image is center-cropped to multiples of 16. With ``augment`` every
    image yields ``patches_per_image`` random crops with random horizontal
    flips, drawn from ``seed``; without it, images are tiled left-to-right,
    top-to-bottom into non-overlapping patches. Files are visited in sorted
    name order, so the stream order is fixed by ``seed``.
    """

    path: Path
    patch_size: int = 128
    augment: bool = False
    seed: int = 0
    patches_per_image: int = 1
    files: List[Path] = field(init=False)

    def __post_init__(self):
        self.path = Path(self.path)
        if not self.path.is_dir():
            raise FileNotFoundError(f"not a directory: {self.path}")
        if self.patch_size % 16 or self.patch_size <= 0:
            raise ValueError("patch_size must be a positive multiple of 16")
        self.files = sorted(p for p in self.path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not self.files:
            raise ValueError(f"no images found in {self.path}")

    def _load(self, p: Path):
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
            return None
        try:
            return center_crop16(arr)
        except ValueError:
            log.warning("skipping image %s: smaller than 16 pixels", p)
            return None

    def __iter__(self) -> Iterator[np.ndarray]:
        rng = np.random.default_rng(self.seed)
        ps = self.patch_size
        for p in self.files:
            img = self._load(p)
            if img is None:
                continue
            h, w = img.shape[:2]
            if h < ps or w < ps:
                log.warning("skipping image %s: smaller than patch size %d", p, ps)
                continue
            if self.augment:
                for _ in range(self.patches_per_image):
                    top = int(rng.integers(0, h - ps + 1))
                    left = int(rng.integers(0, w - ps + 1))
                    patch = img[top: top + ps, left: left + ps]
                    if rng.random() < 0.5:
                        patch = patch[:, ::-1]
                    yield np.ascontiguousarray(patch)
            else:
                for top in range(0, h - ps + 1, ps):
                    for left in range(0, w - ps + 1, ps):
                        yield img[top: top + ps, left: left + ps].copy()


def load_image_folder(path, patch_size: int = 128, augment: bool = False, seed: int = 0,
                      patches_per_image: int = 1) -> ImageFolderStream:
    return ImageFolderStream(Path(path), patch_size, augment, seed, patches_per_image)
