"""Confusion-matrix metrics: mean IoU and pixel accuracy."""
from __future__ import annotations

import numpy as np

from ._validation import IGNORE_INDEX


class MetricError(ValueError):
    """Metric is undefined for the accumulated counts."""


class ConfusionMatrix:
    """K x K counts; ``counts[i, j]`` = pixels with ground truth i predicted as j."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        self.counts = accumulate(self.counts, pred, gt, self.ignore_index)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(counts: np.ndarray, pred, gt, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred and gt differ in size: {pred.size} vs {gt.size}")
    k = counts.shape[0]
    keep = gt != ignore_index
    pred, gt = pred[keep], gt[keep]
    if gt.size and (gt.max() >= k or gt.min() < 0 or pred.max() >= k or pred.min() < 0):
        raise ValueError(f"label values must lie in [0, {k})")
    return counts + np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)


def per_class_iou(counts: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the union is empty."""
    counts = np.asarray(counts, dtype=np.float64)
    tp = np.diag(counts)
    union = counts.sum(0) + counts.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def mean_iou(counts) -> tuple[float, np.ndarray]:
    """Mean over classes with a non-empty union, and the per-class IoU array."""
    if isinstance(counts, ConfusionMatrix):
        counts = counts.counts
    iou = per_class_iou(counts)
    if np.isnan(iou).all():
        raise MetricError("mean IoU undefined: every class has an empty union")
    return float(np.nanmean(iou)), iou


def pixel_accuracy(counts) -> float:
    if isinstance(counts, ConfusionMatrix):
        counts = counts.counts
    total = counts.sum()
    if total == 0:
        raise MetricError("pixel accuracy undefined: no evaluated pixels")
    return float(np.trace(counts) / total)


def evaluation_report(cm: ConfusionMatrix, config_digest: str = "") -> dict:
    miou, iou = mean_iou(cm)
    return {
        "mean_iou": miou,
        "pixel_acc": pixel_accuracy(cm),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "num_pixels": cm.total,
        "config_digest": config_digest,
    }
