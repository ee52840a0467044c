# labelprop/commands/common.py
# Helpers shared by every subcommand

import csv
import logging
import shutil
from pathlib import Path
from typing import Iterable, Sequence

from labelprop.core.config import RunConfig
from labelprop.core.exceptions import ConfigError, ManifestError
from labelprop.datasets import TrainSet, read_train_set

logger = logging.getLogger(__name__)


# ---------------------------
# Output directory + provenance
# ---------------------------
def prepare_output(out, overwrite: bool, config: RunConfig) -> Path:
    """Create ``out`` (cleared first with ``overwrite``) and record the resolved config."""
    if out is None:
        raise ConfigError("--out is required")
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise ConfigError(f"output directory {out} is not empty; pass --overwrite to replace it")
        logger.info("clearing %s", out)
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.resolved_json(), encoding="utf-8")
    return out


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def check_trust(value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"trust factor {value} outside [0, 1]")
    return value


# ---------------------------
# Training-set expressions
# ---------------------------
def set_path(sets_dir, name: str) -> Path:
    return Path(sets_dir) / f"{name}.csv"


def resolve_set(sets_dir, expression: str) -> TrainSet:
    """A set file by exact name, else the ``+``-joined union of named set files."""
    if sets_dir is None:
        raise ConfigError("--sets-dir is required to resolve set names")
    exact = set_path(sets_dir, expression)
    if exact.is_file():
        return read_train_set(exact, expression)
    parts = [p for p in expression.split("+") if p]
    missing = [p for p in parts if not set_path(sets_dir, p).is_file()]
    if not parts or missing:
        raise ManifestError(f"cannot resolve set '{expression}' in {sets_dir}: missing {missing or [expression]}")
    samples = ()
    for part in parts:
        samples = samples + read_train_set(set_path(sets_dir, part), part).samples
    return TrainSet(expression, samples)
