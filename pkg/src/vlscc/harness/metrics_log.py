"""Append-only CSV metric log with a frozen column schema."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Dict, Iterable, List

__all__ = ["SCHEMA_VERSION", "COLUMNS", "MetricsLog", "read_rows"]

SCHEMA_VERSION = 1

# Frozen for schema version 1. Add columns only with a version bump.
COLUMNS = (
    "schema",  # schema version
    "run_id",
    "phase",  # "val" (training-time, static shapes) or "eval" (physical shortening)
    "epoch",
    "step",
    "snr_db",
    "gamma",
    "lambda",
    "seed",
    "n_samples",
    "distortion",  # mean squared error
    "psnr",  # dB, image task
    "mpjpe",  # vector task when dim % 3 == 0
    "lpips",  # perceptual distance, image task
    "mean_rate",  # mean of r(x) or of the rate-map entries
    "mean_kept_symbols",  # real symbols per sample
    "mask_density",
    "spp",  # complex symbols per pixel, image task
    "sidelink_bits",  # payload + code table bits per sample
    "sidelink_payload_bits",  # Huffman payload bits per sample
    "sidelink_bpp",  # sidelink_bits / pixels, image task
    "sidelink_fixed_bpp",  # fixed-length rate-map cost, image task
    "loss",
)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(v)
    return str(v)


class MetricsLog:
    """CSV file with one header row; rows are appended and flushed immediately."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(COLUMNS)
        else:
            with self.path.open(newline="") as fh:
                header = next(csv.reader(fh))
            if tuple(header) != COLUMNS:
                raise ValueError(f"{self.path} has an incompatible header")

    def append(self, row: Dict) -> None:
        unknown = set(row) - set(COLUMNS)
        if unknown:
            raise KeyError(f"unknown metric columns: {sorted(unknown)}")
        full = {"schema": SCHEMA_VERSION, **row}
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(full.get(c)) for c in COLUMNS])

    def extend(self, rows: Iterable[Dict]) -> None:
        for r in rows:
            self.append(r)

    def rows(self) -> List[Dict]:
        return read_rows(self.path)


_INT_COLS = {"schema", "epoch", "step", "seed", "n_samples"}
_STR_COLS = {"run_id", "phase"}


def read_rows(path) -> List[Dict]:
    """Parse a metrics CSV back into typed dicts (blank cells become ``nan``)."""
    out = []
    with Path(path).open(newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                if k in _STR_COLS:
                    row[k] = v
                elif k in _INT_COLS:
                    row[k] = int(v) if v != "" else None
                else:
                    row[k] = float(v) if v != "" else math.nan
            out.append(row)
    return out
