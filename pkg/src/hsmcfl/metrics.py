"""Accuracy, one-vs-rest G-mean and macro G-mean from confusion matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .models import MetricsBundle


class MetricsError(ValueError):
    """Raised when a metric is undefined for the given counts."""


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """counts[t, p] = number of samples of true class t predicted as p."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise MetricsError(f"confusion matrix must be square, got {counts.shape}")
        if np.any(counts < 0):
            raise MetricsError("confusion counts must be nonnegative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def class_count(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, c: int) -> tuple[int, int, int, int]:
        """(TP, FN, FP, TN) for class ``c`` against all others."""
        tp = int(self.counts[c, c])
        fn = int(self.counts[c].sum()) - tp
        fp = int(self.counts[:, c].sum()) - tp
        tn = self.total - tp - fn - fp
        return tp, fn, fp, tn


def confusion(y_true: np.ndarray, y_pred: np.ndarray, K: int) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise MetricsError(f"{y_true.size} true labels but {y_pred.size} predictions")
    for name, y in (("true", y_true), ("predicted", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= K):
            raise MetricsError(f"{name} label out of range for {K} classes")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise MetricsError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def gmean_class(cm: ConfusionMatrix, c: int) -> float:
    """sqrt(recall * specificity) for class ``c``; specificity is 1 when no other class occurs."""
    tp, fn, fp, tn = cm.one_vs_rest(c)
    if tp + fn == 0:
        raise MetricsError(f"class {c} has no true samples; G-mean is undefined")
    recall = tp / (tp + fn)
    specificity = 1.0 if tn + fp == 0 else tn / (tn + fp)
    return math.sqrt(recall * specificity)


def per_class_gmean(cm: ConfusionMatrix) -> list[float]:
    return [gmean_class(cm, c) for c in range(cm.class_count)]


def macro_gmean(cm: ConfusionMatrix) -> float:
    return _mean(per_class_gmean(cm))


def _mean(values: list[float]) -> float:
    return sum(values) / len(values)


def evaluate_predictions(y_true: np.ndarray, y_pred: np.ndarray, K: int) -> MetricsBundle:
    cm = confusion(y_true, y_pred, K)
    per_class = per_class_gmean(cm)
    return MetricsBundle(
        accuracy=accuracy(cm),
        per_class_gmean=per_class,
        macro_gmean=_mean(per_class),
        confusion=cm.counts.tolist(),
    )


def write_confusion_csv(cm: ConfusionMatrix, path: Path, class_names: list[str]) -> Path:
    """Rows are true classes, columns predicted classes, both named."""
    if len(class_names) != cm.class_count:
        raise MetricsError(f"{len(class_names)} names for {cm.class_count} classes")
    frame = pd.DataFrame(cm.counts, index=class_names, columns=class_names)
    frame.index.name = "true\\pred"
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, lineterminator="\n")
    return path
