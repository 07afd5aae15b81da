from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError, UndefinedMetricError


class ConfusionMatrix:
    """K x K pixel counts, rows = ground truth, cols = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred_map, gt_map, ignore_index: Optional[int] = None) -> None:
        pred = np.asarray(pred_map).reshape(-1).astype(np.int64)
        gt = np.asarray(gt_map).reshape(-1).astype(np.int64)
        if np.shape(pred_map) != np.shape(gt_map):
            raise ShapeError(f"prediction {np.shape(pred_map)} and ground truth {np.shape(gt_map)} differ")
        keep = np.ones_like(gt, dtype=bool) if ignore_index is None else gt != ignore_index
        pred, gt = pred[keep], gt[keep]
        K = self.num_classes
        if ((pred < 0) | (pred >= K) | (gt < 0) | (gt >= K)).any():
            raise ContractError(f"class index outside [0, {K})")
        self.counts += np.bincount(gt * K + pred, minlength=K * K).reshape(K, K)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(cm) -> tuple[float, np.ndarray]:
    """Mean IoU over classes with a non-zero denominator; excluded classes are NaN."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    tp = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - tp
    valid = denom > 0
    if not valid.any():
        raise UndefinedMetricError("mIoU undefined: no class has any pixels")
    iou = np.full(tp.shape, np.nan)
    iou[valid] = tp[valid] / denom[valid]
    return float(iou[valid].mean()), iou


@dataclass
class GroupingStats:
    histogram: np.ndarray  # routed channels per class
    accuracy: Optional[float] = None


def grouping_stats(assignments: Iterable, num_classes: int, sources: Optional[Sequence] = None) -> GroupingStats:
    """Histogram of channel -> class routing over a run.

    `sources`, if given, holds the true class of every channel (one array per
    assignment) and yields the fraction routed correctly.
    """
    hist = np.zeros(num_classes, dtype=np.int64)
    correct = total = 0
    assignments = list(assignments)
    for i, a in enumerate(assignments):
        classes = np.asarray(getattr(a, "classes", a))
        hist += np.bincount(classes, minlength=num_classes)
        if sources is not None:
            src = np.asarray(sources[i])
            correct += int((src == classes).sum())
            total += classes.size
    acc = correct / total if sources is not None and total else None
    return GroupingStats(hist, acc)


def write_iou_csv(path, per_class: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "iou"])
        for k, v in enumerate(per_class):
            w.writerow([k, "" if np.isnan(v) else f"{v:.6f}"])


def write_grouping_csv(path, stats: GroupingStats) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "channels"])
        for k, v in enumerate(stats.histogram):
            w.writerow([k, int(v)])


def synthetic_ptoken(d: int, num_classes: int, rng, dominant: float = 0.4) -> np.ndarray:
    """d x K soft class map where every class dominates an equal share of tokens."""
    owner = rng.permutation(np.arange(d) % num_classes)
    rest = (1.0 - dominant) / (num_classes - 1)
    p = np.full((d, num_classes), rest)
    p[np.arange(d), owner] = dominant
    return p


def csg_routing_accuracy(sigma: float, seed: int = 0, d: int = 16, channels: int = 1024, num_classes: int = 4,
                         normalize: bool = False) -> GroupingStats:
    """Route channels built as (noisy) copies of probability-token columns and
    score them against the column they were copied from."""
    from .memory import channel_class_similarity, group_channels

    rng = np.random.default_rng(seed)
    p = synthetic_ptoken(d, num_classes, rng)
    sources = rng.integers(0, num_classes, size=channels)
    feat = p[:, sources] + rng.normal(0.0, sigma, size=(d, channels)) if sigma > 0 else p[:, sources]
    a = group_channels(channel_class_similarity(feat, p, normalize))
    return grouping_stats([a], num_classes, [sources])
