"""Training, evaluation and sweep tooling for the codecs."""
from vlscc.harness.config import RunConfig, load_config, save_config
from vlscc.harness.checkpoint import load_checkpoint, save_checkpoint
from vlscc.harness.metrics_log import COLUMNS, MetricsLog, read_rows
from vlscc.harness.runner import (
    evaluate,
    export_rate_maps,
    fixed_length_baseline,
    select_gamma,
    sweep,
    train,
)

__all__ = [
    "RunConfig", "load_config", "save_config", "load_checkpoint", "save_checkpoint",
    "COLUMNS", "MetricsLog", "read_rows", "train", "evaluate", "sweep", "select_gamma",
    "fixed_length_baseline", "export_rate_maps",
]
