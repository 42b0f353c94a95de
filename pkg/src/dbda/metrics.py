"""Confusion-matrix evaluation: per-class precision, recall, F1 and IoU."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConfusionMatrix:
    """``counts[t, p]`` = number of pixels of true class t predicted as p."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise ValueError(f"counts must be a nonnegative {num_classes}x{num_classes} matrix")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ValueError(f"cannot merge {self.num_classes}- and {other.num_classes}-class matrices")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.counts.tolist()})"


def accumulate(cm: ConfusionMatrix, pred, truth, ignore_index: int | None = None) -> ConfusionMatrix:
    """Return ``cm`` plus the (truth, pred) pixel pairs of one batch."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    keep = np.ones(truth.shape, bool) if ignore_index is None else truth != ignore_index
    t, p = truth[keep].astype(np.int64), pred[keep].astype(np.int64)
    c = cm.num_classes
    for name, v in (("truth", t), ("prediction", p)):
        if v.size and (v.min() < 0 or v.max() >= c):
            raise ValueError(f"{name} contains class values outside [0, {c})")
    counts = np.bincount(t * c + p, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(c, cm.counts + counts)


@dataclass(frozen=True)
class MetricReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    iou: np.ndarray
    # True where a metric's denominator vanished and 0 was substituted
    undefined: np.ndarray
    pixel_accuracy: float

    @property
    def num_classes(self) -> int:
        return len(self.iou)

    @property
    def mean_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def mean_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def mean_f1(self) -> float:
        return float(self.f1.mean())

    @property
    def mean_iou(self) -> float:
        return float(self.iou.mean())

    @property
    def mean_class_accuracy(self) -> float:
        """Mean per-class accuracy, i.e. mean recall."""
        return self.mean_recall

    def summary(self) -> dict[str, float]:
        return {
            "pixel_accuracy": self.pixel_accuracy,
            "mean_class_accuracy": self.mean_class_accuracy,
            "precision": self.mean_precision,
            "recall": self.mean_recall,
            "f1": self.mean_f1,
            "iou": self.mean_iou,
        }


def _ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zero = den == 0
    return np.where(zero, 0.0, num / np.where(zero, 1, den)), zero


def report(cm: ConfusionMatrix) -> MetricReport:
    if cm.total == 0:
        raise ValueError("cannot report on an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    precision, u1 = _ratio(tp, tp + fp)
    recall, u2 = _ratio(tp, tp + fn)
    f1, u3 = _ratio(2 * tp, 2 * tp + fp + fn)
    iou, _ = _ratio(tp, tp + fp + fn)
    return MetricReport(
        precision=precision,
        recall=recall,
        f1=f1,
        iou=iou,
        undefined=u1 | u2 | u3,
        pixel_accuracy=float(tp.sum() / counts.sum()),
    )


def report_csv(rep: MetricReport) -> str:
    buf = io.StringIO()
    buf.write("class,precision,recall,f1,iou\n")
    rows = [(str(c), rep.precision[c], rep.recall[c], rep.f1[c], rep.iou[c]) for c in range(rep.num_classes)]
    rows.append(("mean", rep.mean_precision, rep.mean_recall, rep.mean_f1, rep.mean_iou))
    for name, *vals in rows:
        buf.write(name + "".join(f",{v:.6f}" for v in vals) + "\n")
    return buf.getvalue()


def write_report_csv(rep: MetricReport, path) -> None:
    Path(path).write_text(report_csv(rep), newline="")
