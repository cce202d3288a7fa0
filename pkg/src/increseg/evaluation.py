"""Segmentation metrics: thresholding, IoU, F1, boundary-band exclusion, and
multi-class map rendering.

Per-class counts are micro-aggregated across tiles by default (global
tp/fp/fn, metrics computed once); per-tile macro averaging sits behind a
flag. Empty-vs-empty comparisons score 1.0 so absent classes do not poison
averages.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from .data import ClassSet, MaskStack


@dataclass
class ClassMetrics:
    iou: float
    f1: float
    tp: int
    fp: int
    fn: int


@dataclass
class MetricReport:
    per_class: dict[str, ClassMetrics]
    overall_iou: float
    overall_f1: float
    stage: int = 0
    epoch: int = 0

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "epoch": self.epoch,
            "overall_iou": self.overall_iou,
            "overall_f1": self.overall_f1,
            "per_class": {
                c: {"iou": m.iou, "f1": m.f1, "tp": m.tp, "fp": m.fp, "fn": m.fn}
                for c, m in self.per_class.items()
            },
        }

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class", "iou", "f1", "tp", "fp", "fn"])
            for c, m in self.per_class.items():
                writer.writerow([c, m.iou, m.f1, m.tp, m.fp, m.fn])
            writer.writerow(["overall", self.overall_iou, self.overall_f1, "", "", ""])


def threshold_probs(probs: np.ndarray) -> np.ndarray:
    """Binary mask: positive iff p >= 0.5."""
    return (np.asarray(probs) >= 0.5).astype(np.uint8)


def _counts(pred, gt, ignore=None):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != gt shape {gt.shape}")
    if ignore is not None:
        keep = ~np.asarray(ignore).astype(bool)
        if keep.shape != pred.shape:
            raise ValueError(f"ignore shape {keep.shape} != mask shape {pred.shape}")
        pred = pred & keep
        gt = gt & keep
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def iou_from_counts(tp, fp, fn) -> float:
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def f1_from_counts(tp, fp, fn) -> float:
    if tp == 0:
        return 1.0 if fp + fn == 0 else 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def iou(pred, gt, ignore=None) -> float:
    """|pred AND gt| / |pred OR gt|, ignoring masked pixels; 1.0 when both empty."""
    return iou_from_counts(*_counts(pred, gt, ignore))


def f1(pred, gt, ignore=None) -> float:
    """Harmonic mean of precision and recall; 1.0 when tp = fp = fn = 0."""
    return f1_from_counts(*_counts(pred, gt, ignore))


def erode_gt(gt: MaskStack, radius: int) -> np.ndarray:
    """Ignore plane marking pixels within Chebyshev `radius` of an inter-class
    boundary (background counts as its own label)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    planes = np.asarray(gt.planes)
    h, w = planes.shape[:2]
    if radius == 0:
        return np.zeros((h, w), dtype=bool)
    size = 2 * radius + 1
    ignore = np.zeros((h, w), dtype=bool)
    for k in range(planes.shape[2]):
        plane = planes[:, :, k]
        hi = maximum_filter(plane, size=size, mode="nearest")
        lo = minimum_filter(plane, size=size, mode="nearest")
        ignore |= hi != lo
    return ignore


def compute_report(pred_stacks, gt_stacks, classes: ClassSet, ignore_planes=None,
                   macro=False, stage: int = 0, epoch: int = 0) -> MetricReport:
    """Metrics over matched (prediction, ground-truth) binary stacks.

    macro=False accumulates global per-class counts before computing metrics;
    macro=True averages per-tile metric values instead.
    """
    pred_stacks = list(pred_stacks)
    gt_stacks = list(gt_stacks)
    if len(pred_stacks) != len(gt_stacks):
        raise ValueError("prediction/ground-truth tile counts differ")
    if ignore_planes is None:
        ignore_planes = [None] * len(pred_stacks)

    per_class = {}
    for k, cls in enumerate(classes):
        if macro:
            ious, f1s, tps, fps, fns = [], [], [], [], []
            for p, g, ign in zip(pred_stacks, gt_stacks, ignore_planes):
                tp, fp, fn = _counts(p[..., k], g[..., k], ign)
                ious.append(iou_from_counts(tp, fp, fn))
                f1s.append(f1_from_counts(tp, fp, fn))
                tps.append(tp); fps.append(fp); fns.append(fn)
            per_class[cls] = ClassMetrics(
                float(np.mean(ious)), float(np.mean(f1s)),
                sum(tps), sum(fps), sum(fns),
            )
        else:
            tp = fp = fn = 0
            for p, g, ign in zip(pred_stacks, gt_stacks, ignore_planes):
                dtp, dfp, dfn = _counts(p[..., k], g[..., k], ign)
                tp += dtp; fp += dfp; fn += dfn
            per_class[cls] = ClassMetrics(
                iou_from_counts(tp, fp, fn), f1_from_counts(tp, fp, fn), tp, fp, fn
            )

    overall_iou = float(np.mean([m.iou for m in per_class.values()]))
    overall_f1 = float(np.mean([m.f1 for m in per_class.values()]))
    return MetricReport(per_class, overall_iou, overall_f1, stage=stage, epoch=epoch)


def render_multiclass(probs: np.ndarray, palette: dict[str, tuple],
                      classes: ClassSet,
                      background: str = "background") -> np.ndarray:
    """Color raster: argmax class where max p >= 0.5 (ties to the lowest class
    index), background color elsewhere."""
    probs = np.asarray(probs)
    missing = [c for c in list(classes) + [background] if c not in palette]
    if missing:
        raise ValueError(f"palette missing entries for {missing}")
    best = probs.argmax(axis=2)
    confident = probs.max(axis=2) >= 0.5
    out = np.empty(probs.shape[:2] + (3,), dtype=np.uint8)
    out[:] = palette[background]
    for k, cls in enumerate(classes):
        out[confident & (best == k)] = palette[cls]
    return out
