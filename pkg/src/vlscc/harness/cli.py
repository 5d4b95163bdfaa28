"""Command line entry point: ``vlscc <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from vlscc.harness.config import RunConfig, apply_overrides, load_config
from vlscc.harness.metrics_log import MetricsLog, read_rows
from vlscc.harness import runner

# flags that map one-to-one onto RunConfig fields
_FIELD_FLAGS = {
    "task": str, "run_id": str, "train_snr_db": float, "gamma": float, "lam": float,
    "gamma_warmup_steps": int, "random_rate_steps": int, "random_rate_every": int, "lr": float, "ran_lr_scale": float, "batch_size": int,
    "epochs": int, "steps_per_epoch": int, "val_samples": int, "eval_samples": int,
    "budget": float, "seed": int, "out_dir": str,
}
_LIST_FLAGS = {"eval_snr_db": float, "eval_seeds": int}


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry; dotted keys reach into codec/data")
    for name, typ in _FIELD_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    for name, typ in _LIST_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name,
                       type=lambda s, t=typ: [t(v) for v in s.split(",")], help="comma separated")


def _config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config, args.overrides)
    else:
        raw = apply_overrides({}, args.overrides)
        if args.task:
            raw["task"] = args.task
        cfg = RunConfig.from_dict(raw)
    changes = {k: getattr(args, k) for k in (*_FIELD_FLAGS, *_LIST_FLAGS) if getattr(args, k, None) is not None}
    return cfg.replace(**changes) if changes else cfg


def _print_rows(rows) -> None:
    for r in rows:
        print(json.dumps({k: v for k, v in r.items()}, default=float))


def _cmd_train(args) -> int:
    result = runner.train(_config(args), resume=args.resume)
    print(f"last checkpoint: {result.last}\nbest checkpoint: {result.best}\nmetrics: {result.log_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _config(args) if (args.config or args.overrides) else None
    rows = runner.evaluate(args.checkpoint, cfg, snr_list=args.snr, seeds=args.seeds,
                           n_samples=args.n_samples)
    if args.out:
        MetricsLog(args.out).extend(rows)
    _print_rows(rows)
    return 0


def _cmd_sweep(args) -> int:
    rows = runner.sweep(_config(args), args.axis, args.values, workers=args.workers)
    _print_rows(rows)
    return 0


def _cmd_baseline(args) -> int:
    result, rows = runner.fixed_length_baseline(_config(args), args.n_symbols)
    print(f"checkpoint: {result.last}")
    _print_rows(rows)
    return 0


def _cmd_select_gamma(args) -> int:
    print(runner.select_gamma(args.budget, read_rows(args.log)))
    return 0


def _cmd_export(args) -> int:
    path = runner.export_rate_maps(args.checkpoint, args.out, n=args.n, seed=args.seed)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlscc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one codec")
    _add_config_args(p)
    p.add_argument("--resume", type=Path, help="continue from a last.pt checkpoint")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with physical shortening")
    p.add_argument("checkpoint", type=Path)
    _add_config_args(p)
    p.add_argument("--snr", type=_floats, help="comma separated SNRs in dB")
    p.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")])
    p.add_argument("--n-samples", type=int)
    p.add_argument("--out", type=Path, help="append rows to this CSV")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate across gamma or SNR values")
    _add_config_args(p)
    p.add_argument("--axis", choices=("gamma", "snr"), required=True)
    p.add_argument("--values", type=_floats, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("baseline", help="train the fixed-length codec")
    _add_config_args(p)
    p.add_argument("--n-symbols", type=int, required=True)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("select-gamma", help="pick gamma from a sweep log under a symbol budget")
    p.add_argument("log", type=Path)
    p.add_argument("--budget", type=float, required=True)
    p.set_defaults(func=_cmd_select_gamma)

    p = sub.add_parser("export", help="write rate maps (PNG grid for images, CSV for vectors)")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("-n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_export)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
