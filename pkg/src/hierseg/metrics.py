"""Evaluation metrics: pixel mIoU, image-level retrieval scores, timing.

The confusion matrix is accumulated with integer counts (rows = ground
truth, columns = prediction); pixels carrying the ignore label never enter
any cell. Per-class IoU is TP / (TP + FP + FN) and the mean is taken over
classes that actually occur in the ground truth of the evaluated split.

Image-level classification quality is measured on per-image class scores
obtained by spatially max-pooling the score map: average precision uses
the area under the precision-recall step curve (all points, no smoothing),
and precision/recall/F1 are micro-averaged over every (image, class)
decision at a fixed threshold.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from statistics import median

import numpy as np

from .errors import ShapeError, ValidationError

IGNORE_LABEL = 255


class ConfusionMatrix:
    """Mergeable (num_labels x num_labels) pixel count table."""

    def __init__(self, num_labels: int, ignore_label: int = IGNORE_LABEL):
        if num_labels < 1:
            raise ValidationError(f"need at least one label, got {num_labels}")
        self.num_labels = num_labels
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_labels, num_labels), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(
                f"prediction {pred.shape} and ground truth {gt.shape} differ"
            )
        valid = gt != self.ignore_label
        p = pred[valid].astype(np.int64)
        g = gt[valid].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= self.num_labels):
            raise ValidationError(
                f"prediction labels outside [0, {self.num_labels})"
            )
        if g.size and (g.min() < 0 or g.max() >= self.num_labels):
            raise ValidationError(
                f"ground-truth labels outside [0, {self.num_labels})"
            )
        flat = np.bincount(g * self.num_labels + p,
                           minlength=self.num_labels ** 2)
        self.counts += flat.reshape(self.num_labels, self.num_labels)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_labels != self.num_labels:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    @property
    def total_pixels(self) -> int:
        return int(self.counts.sum())

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN where a class has no TP, FP, or FN pixels."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)

    def miou(self) -> float:
        """Mean IoU over classes present in the accumulated ground truth."""
        present = self.counts.sum(axis=1) > 0
        if not present.any():
            raise ValidationError("no ground-truth pixels accumulated")
        return float(np.nanmean(self.per_class_iou()[present]))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under the precision-recall step curve for one class.

    ``scores`` ranks the items; ``positives`` marks the relevant ones.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ShapeError("scores and positives must be aligned 1-D arrays")
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValidationError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.arange(1, len(scores) + 1)
    precision_at = np.cumsum(hits) / ranks
    return float(precision_at[hits].sum() / n_pos)


@dataclass(frozen=True)
class ImageLevelReport:
    map_score: float
    f1: float
    precision: float
    recall: float
    per_class_ap: dict[str, float]


def image_level_metrics(scores: np.ndarray, presence: np.ndarray,
                        threshold: float = 0.5,
                        class_names: list[str] | None = None) -> ImageLevelReport:
    """Multi-label classification quality from per-image class scores.

    ``scores`` is (images, classes); ``presence`` is the boolean ground
    truth of the same shape. Classes without any positive image are skipped
    in the mAP mean (their AP is undefined).
    """
    scores = np.asarray(scores, dtype=np.float64)
    presence = np.asarray(presence, dtype=bool)
    if scores.ndim != 2 or scores.shape != presence.shape:
        raise ShapeError("scores and presence must both be (images, classes)")
    if scores.shape[0] == 0:
        raise ValidationError("no images to evaluate")
    n_classes = scores.shape[1]
    names = class_names or [str(c) for c in range(n_classes)]

    aps: dict[str, float] = {}
    for c in range(n_classes):
        if presence[:, c].any():
            aps[names[c]] = average_precision(scores[:, c], presence[:, c])
    if not aps:
        raise ValidationError("no class has a positive image")

    decided = scores >= threshold
    tp = int(np.logical_and(decided, presence).sum())
    fp = int(np.logical_and(decided, ~presence).sum())
    fn = int(np.logical_and(~decided, presence).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ImageLevelReport(
        map_score=float(np.mean(list(aps.values()))),
        f1=f1, precision=precision, recall=recall, per_class_ap=aps,
    )


def max_pool_scores(score_grid: np.ndarray) -> np.ndarray:
    """Per-class spatial maximum of an (h, w, C) score map."""
    grid = np.asarray(score_grid)
    if grid.ndim != 3:
        raise ShapeError(f"expected (h, w, C) scores, got {grid.shape}")
    return grid.reshape(-1, grid.shape[2]).max(axis=0)


@dataclass
class StageTimer:
    """Wall-clock stage durations, one list entry per timed invocation."""

    durations_ms: dict[str, list[float]] = field(default_factory=dict)

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = (time.perf_counter() - start) * 1000.0
            self.durations_ms.setdefault(name, []).append(elapsed)

    def merge(self, other: "StageTimer") -> "StageTimer":
        for name, values in other.durations_ms.items():
            self.durations_ms.setdefault(name, []).extend(values)
        return self

    def medians(self) -> dict[str, float]:
        return {name: median(vals) for name, vals in self.durations_ms.items() if vals}

    def totals(self) -> dict[str, float]:
        return {name: sum(vals) for name, vals in self.durations_ms.items()}
