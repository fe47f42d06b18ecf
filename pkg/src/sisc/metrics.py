"""Classifier evaluation: confusion counts, the three headline rates, ROC
curves with trapezoid AUC, and cross-validation aggregation.

Malignant is the positive class throughout, so sensitivity is malignant
recall. Undefined rates (empty denominator) come back as NaN rather than
raising, so callers can format them without special-casing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

POSITIVE = "malignant"
NEGATIVE = "benign"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _as_positive_flags(labels, name: str) -> np.ndarray:
    flags = []
    for value in labels:
        if value in (POSITIVE, 1, True):
            flags.append(True)
        elif value in (NEGATIVE, 0, False):
            flags.append(False)
        else:
            raise DataError(f"{name} label {value!r} is neither "
                            f"{NEGATIVE!r}/0 nor {POSITIVE!r}/1")
    return np.asarray(flags, dtype=bool)


def confusion(predicted, actual) -> ConfusionCounts:
    """Count binary outcomes with malignant as the positive class."""
    pred = _as_positive_flags(predicted, "predicted")
    true = _as_positive_flags(actual, "actual")
    if len(pred) != len(true):
        raise DataError(f"predicted has {len(pred)} labels, actual has "
                        f"{len(true)}")
    return ConfusionCounts(tp=int(np.sum(pred & true)),
                           fp=int(np.sum(pred & ~true)),
                           tn=int(np.sum(~pred & ~true)),
                           fn=int(np.sum(~pred & true)))


def _rate(numerator: int, denominator: int) -> float:
    if denominator == 0:
        return float("nan")
    return numerator / denominator


def metrics(counts: ConfusionCounts) -> tuple[float, float, float]:
    """(accuracy, sensitivity, specificity) from confusion counts."""
    if counts.total == 0:
        raise DataError("cannot compute metrics over zero samples")
    accuracy = (counts.tp + counts.tn) / counts.total
    sensitivity = _rate(counts.tp, counts.tp + counts.fn)
    specificity = _rate(counts.tn, counts.tn + counts.fp)
    return accuracy, sensitivity, specificity


@dataclass
class RocCurve:
    """Threshold-sweep operating points, (fpr, tpr) rows from (0,0) to (1,1)."""

    points: np.ndarray
    auc: float


def roc_auc(scores, labels) -> RocCurve:
    """ROC curve over unique score thresholds plus trapezoid AUC.

    Tied scores step both rates at once, which draws the tie block as a
    diagonal segment and makes the trapezoid area equal the Mann-Whitney
    statistic with half credit for ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = _as_positive_flags(labels, "actual")
    if scores.ndim != 1 or scores.shape != flags.shape:
        raise DataError(f"scores shape {scores.shape} does not match "
                        f"{len(flags)} labels")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    n_pos = int(flags.sum())
    n_neg = len(flags) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs at least one sample of each class")
    order = np.argsort(-scores, kind="stable")
    sorted_flags = flags[order]
    sorted_scores = scores[order]
    # indices where a threshold block ends (last occurrence of each score)
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    boundary = np.append(boundary, len(sorted_scores) - 1)
    tps = np.cumsum(sorted_flags)[boundary]
    fps = np.cumsum(~sorted_flags)[boundary]
    tpr = np.concatenate(([0.0], tps / n_pos))
    fpr = np.concatenate(([0.0], fps / n_neg))
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))
    return RocCurve(points=np.column_stack([fpr, tpr]), auc=area)


def cv_aggregate(values, mean_only: bool = False) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation across folds.

    With fewer than two folds the deviation is undefined; that is an error
    unless mean_only is set, in which case it comes back as NaN.
    """
    values = np.asarray(list(values), dtype=np.float64)
    if values.ndim != 1 or len(values) == 0:
        raise DataError("cv_aggregate needs a flat, non-empty value list")
    mean = float(values.mean())
    if len(values) < 2:
        if not mean_only:
            raise DataError(f"need at least 2 folds for a deviation, got "
                            f"{len(values)}")
        return mean, float("nan")
    return mean, float(values.std(ddof=1))


def format_mean_std(mean: float, std: float) -> str:
    """Two-decimal report cell; a NaN deviation drops the +/- part."""
    if math.isnan(std):
        return f"{mean:.2f}"
    return f"{mean:.2f}±{std:.2f}"


METRICS_HEADER = ["fold", "accuracy", "sensitivity", "specificity", "auc"]

# the summary row's fold label states the deviation convention
SUMMARY_LABEL = "mean±std(n-1)"


def write_metrics_report(fold_rows, path) -> None:
    """CSV with one row per fold and a trailing mean+/-std summary row.

    fold_rows holds (accuracy, sensitivity, specificity, auc) per fold.
    """
    rows = [tuple(float(v) for v in row) for row in fold_rows]
    if not rows:
        raise DataError("metrics report needs at least one fold row")
    if any(len(row) != 4 for row in rows):
        raise DataError("each fold row must hold exactly 4 metric values")
    columns = list(zip(*rows))
    mean_only = len(rows) < 2
    summary = [format_mean_std(*cv_aggregate(column, mean_only=mean_only))
               for column in columns]
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for fold, row in enumerate(rows, start=1):
            writer.writerow([fold] + [f"{v:.6f}" for v in row])
        writer.writerow([SUMMARY_LABEL] + summary)


def write_roc_csv(curve: RocCurve, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["fpr", "tpr"])
        for fpr, tpr in curve.points:
            writer.writerow([f"{fpr:.9f}", f"{tpr:.9f}"])
