"""Segmentation metrics: confusion matrix, IoU family, accuracies, latency.

Rows of the confusion matrix are ground truth, columns are predictions.
Classes absent from both truth and prediction are flagged absent and
excluded from averaged metrics rather than scored zero.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .cloud import CLASS_NAMES, NUM_CLASSES, UNLABELED


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or (c < 0).any():
            raise ValueError("counts must be a square non-negative matrix")
        self.counts = c

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(pred, truth, num_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError("pred/truth length mismatch")
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes
                      or truth.min() < 0 or truth.max() >= num_classes):
        raise ValueError("class code out of range")
    flat = truth * num_classes + pred
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def iou_per_class(m: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """(iou, present) where present[c] is False when TP+FP+FN = 0."""
    tp = np.diag(m.counts).astype(np.float64)
    fp = m.counts.sum(axis=0) - tp
    fn = m.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    iou = np.zeros(m.num_classes)
    iou[present] = tp[present] / denom[present]
    return iou, present


def miou(m: ConfusionMatrix, include=None) -> float:
    """Mean IoU over the requested classes, skipping absent ones."""
    iou, present = iou_per_class(m)
    if include is None:
        mask = present
    else:
        mask = np.zeros(m.num_classes, dtype=bool)
        mask[list(include)] = True
        mask &= present
    if not mask.any():
        raise ValueError("no present class to average over")
    return float(iou[mask].mean())


def mean_iou_of(ious) -> float:
    """Plain arithmetic mean of already-computed per-class IoU values."""
    vals = np.asarray(ious, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("empty IoU list")
    return float(vals.mean())


def accuracies(m: ConfusionMatrix) -> tuple[float, float]:
    """(overall accuracy, mean per-class recall over present classes)."""
    total = m.counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    overall = float(np.diag(m.counts).sum() / total)
    row = m.counts.sum(axis=1)
    present = row > 0
    recalls = np.diag(m.counts)[present] / row[present]
    return overall, float(recalls.mean())


@dataclass
class MetricsReport:
    overall_accuracy: float
    per_class_accuracy: float
    per_class_iou: dict
    miou: float
    evaluated_classes: list

    def to_json(self) -> str:
        return json.dumps({
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "evaluated_classes": self.evaluated_classes,
        }, sort_keys=True, indent=2)

    def to_text(self) -> str:
        lines = [f"overall accuracy : {self.overall_accuracy:.4f}",
                 f"per-class acc.   : {self.per_class_accuracy:.4f}",
                 f"mIoU             : {self.miou:.4f}"]
        for name, v in self.per_class_iou.items():
            lines.append(f"  IoU {name:<13}: {v:.4f}")
        return "\n".join(lines)


def report(m: ConfusionMatrix, classes: int = 8) -> MetricsReport:
    """Build a report over every class in the matrix, or — for the standard
    8-class scheme — the 7 named ones (Unlabeled ground truth dropped)."""
    n = m.num_classes
    if classes == 7 and n == NUM_CLASSES:
        include = [c for c in range(n) if c != UNLABELED]
        sub = m.counts.copy()
        # Drop Unlabeled ground-truth rows; keep mispredictions into Unlabeled
        # as errors against their true class.
        sub[UNLABELED, :] = 0
        m = ConfusionMatrix(sub)
    elif classes == n:
        include = list(range(n))
    else:
        raise ValueError(f"classes must be 7 or {n} for a {n}-class matrix")
    names = CLASS_NAMES if n == NUM_CLASSES else [f"Class{c}"
                                                 for c in range(n)]
    iou, present = iou_per_class(m)
    mask = np.zeros(n, dtype=bool)
    mask[include] = True
    mask &= present
    overall, per_class = accuracies(m)
    return MetricsReport(
        overall_accuracy=overall,
        per_class_accuracy=per_class,
        per_class_iou={names[c]: float(iou[c]) for c in range(n) if mask[c]},
        miou=float(iou[mask].mean()),
        evaluated_classes=[names[c] for c in range(n) if mask[c]],
    )


@dataclass
class LatencyStats:
    per_stage: dict = field(default_factory=dict)  # stage -> list of seconds

    def record(self, stage: str, seconds: float) -> None:
        self.per_stage.setdefault(stage, []).append(seconds)

    def summary(self) -> dict:
        out = {}
        for stage, xs in self.per_stage.items():
            xs_sorted = sorted(xs)
            p95 = xs_sorted[min(len(xs) - 1, int(round(0.95 * (len(xs) - 1))))]
            out[stage] = {
                "mean": statistics.fmean(xs),
                "median": statistics.median(xs),
                "p95": p95,
                "frames": len(xs),
            }
        return out


def measure_latency(stages: dict, frames) -> LatencyStats:
    """Run named stage callbacks over each frame, timing each with a
    monotonic clock. Each stage receives the previous stage's output."""
    if not frames:
        raise ValueError("need at least one frame")
    stats = LatencyStats()
    for frame in frames:
        value = frame
        t_frame = time.perf_counter()
        for name, fn in stages.items():
            t0 = time.perf_counter()
            value = fn(value)
            stats.record(name, time.perf_counter() - t0)
        stats.record("total", time.perf_counter() - t_frame)
    return stats
