# labelprop/metrics.py
"""
Confusion matrices and class IoU scores.
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from labelprop.core.exceptions import DimensionMismatchError, EmptyEvaluationError, LabelRangeError
from labelprop.imagery import LabelMap, require_same_shape


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are ground-truth classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DimensionMismatchError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def accumulate(conf: ConfusionMatrix, pred: LabelMap, gt: LabelMap) -> ConfusionMatrix:
    require_same_shape(pred, gt, what="prediction and ground truth")
    if pred.void_mask.any():
        raise LabelRangeError("predictions must not contain VOID")
    c = conf.num_classes
    if pred.num_classes > c or gt.num_classes > c:
        raise DimensionMismatchError(
            f"label maps with {max(pred.num_classes, gt.num_classes)} classes do not fit a {c}-class matrix"
        )
    scored = ~gt.void_mask
    flat = gt.labels[scored].astype(np.int64) * c + pred.labels[scored].astype(np.int64)
    return ConfusionMatrix(conf.counts + np.bincount(flat, minlength=c * c).reshape(c, c))


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.num_classes != b.num_classes:
        raise DimensionMismatchError(f"cannot merge {a.num_classes}- and {b.num_classes}-class matrices")
    return ConfusionMatrix(a.counts + b.counts)


def class_iou(conf: ConfusionMatrix) -> List[Optional[float]]:
    """TP / (TP + FP + FN) per class; ``None`` where the class never occurs."""
    diag = np.diag(conf.counts)
    union = conf.counts.sum(axis=1) + conf.counts.sum(axis=0) - diag
    return [float(d) / float(u) if u > 0 else None for d, u in zip(diag, union)]


def average_iou(ious: Sequence[Optional[float]]) -> float:
    defined = [v for v in ious if v is not None]
    if not defined:
        raise EmptyEvaluationError("no class has a defined IoU")
    return float(np.mean(defined))


def mean_iou(conf: ConfusionMatrix) -> float:
    return average_iou(class_iou(conf))


# -----------------------------
# REPORTS
# -----------------------------
def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def write_report(path, conf: ConfusionMatrix, class_names: Sequence[str]) -> float:
    """One ``class,iou`` row per class then a ``mean`` row; returns the mean."""
    if len(class_names) != conf.num_classes:
        raise DimensionMismatchError(f"{len(class_names)} class names for a {conf.num_classes}-class matrix")
    ious = class_iou(conf)
    mean = average_iou(ious)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "iou"])
        for name, iou in zip(class_names, ious):
            writer.writerow([name, _fmt(iou)])
        writer.writerow(["mean", _fmt(mean)])
    return mean


def format_table(cells: Dict[str, Dict[float, Optional[float]]], columns: Sequence[float]) -> List[List[str]]:
    """Rows = set names, columns = trust factors, plus a ``mean`` column and row.

    Missing or failed cells are blank and left out of every mean.
    """
    header = ["set"] + [f"{tf:g}" for tf in columns] + ["mean"]
    rows = [header]
    for name, row in cells.items():
        values = [row.get(tf) for tf in columns]
        defined = [v for v in values if v is not None]
        rows.append([name] + [_fmt(v) for v in values] + [_fmt(float(np.mean(defined)) if defined else None)])
    column_means = []
    for tf in columns:
        defined = [row.get(tf) for row in cells.values() if row.get(tf) is not None]
        column_means.append(float(np.mean(defined)) if defined else None)
    everything = [v for row in cells.values() for v in row.values() if v is not None]
    rows.append(["mean"] + [_fmt(v) for v in column_means] + [_fmt(float(np.mean(everything)) if everything else None)])
    return rows


def write_table(path, rows: List[List[str]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
