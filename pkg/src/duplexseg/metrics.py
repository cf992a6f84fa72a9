"""Segmentation evaluation: per-class Acc/Pre/Rec/IoU/Fsc, mIoU, MaxF/AP.

Counting is exact one-vs-rest pixel counting per class; pixels whose ground
truth is the ignore id are excluded entirely. Ratios with zero denominators
are reported as undefined (None) and excluded from aggregates. MaxF/AP sweep a
256-point threshold grid over a probability map in image space.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import InputError

THRESHOLDS = np.arange(256) / 255.0
AP_RECALL_LEVELS = np.arange(11) / 10.0

METRIC_NAMES = ("acc", "pre", "rec", "iou", "fsc")


@dataclass
class ConfusionCounts:
    tp: np.ndarray  # (num_classes,) int64
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    ignored: int
    num_classes: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if self.num_classes != other.num_classes:
            raise InputError("cannot aggregate counts with different class counts")
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tn=self.tn + other.tn,
            ignored=self.ignored + other.ignored,
            num_classes=self.num_classes,
        )

    @staticmethod
    def zeros(num_classes: int) -> "ConfusionCounts":
        z = lambda: np.zeros(num_classes, dtype=np.int64)
        return ConfusionCounts(tp=z(), fp=z(), fn=z(), tn=z(), ignored=0, num_classes=num_classes)


def confusion(pred_label: np.ndarray, gt_label: np.ndarray, num_classes: int, ignore_id: int = 255) -> ConfusionCounts:
    """Exact one-vs-rest pixel counts per class; ignored ground truth excluded."""
    pred_label = np.asarray(pred_label)
    gt_label = np.asarray(gt_label)
    if pred_label.shape != gt_label.shape:
        raise InputError(f"shape mismatch: pred {pred_label.shape} vs gt {gt_label.shape}")
    valid = gt_label != ignore_id
    p = pred_label[valid]
    g = gt_label[valid]
    counts = ConfusionCounts.zeros(num_classes)
    counts.ignored = int((~valid).sum())
    for c in range(num_classes):
        pc = p == c
        gc = g == c
        counts.tp[c] = int(np.sum(pc & gc))
        counts.fp[c] = int(np.sum(pc & ~gc))
        counts.fn[c] = int(np.sum(~pc & gc))
        counts.tn[c] = int(np.sum(~pc & ~gc))
    return counts


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


@dataclass
class MetricsReport:
    per_class: List[Dict[str, Optional[float]]]
    miou: Optional[float]
    max_f: Optional[float] = None
    ap: Optional[float] = None
    class_names: Optional[List[str]] = None

    def to_dict(self) -> dict:
        return {
            "per_class": self.per_class,
            "miou": self.miou,
            "max_f": self.max_f,
            "ap": self.ap,
            "class_names": self.class_names,
        }


def compute_metrics(counts: ConfusionCounts, class_names: Optional[List[str]] = None) -> MetricsReport:
    per_class = []
    for c in range(counts.num_classes):
        tp, fp, fn, tn = (int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c]), int(counts.tn[c]))
        pre = _ratio(tp, tp + fp)
        rec = _ratio(tp, tp + fn)
        if pre is None or rec is None or pre + rec == 0:
            fsc = None
        else:
            fsc = 2 * pre * rec / (pre + rec)
        per_class.append(
            {
                "acc": _ratio(tp + tn, tp + tn + fp + fn),
                "pre": pre,
                "rec": rec,
                "iou": _ratio(tp, tp + fp + fn),
                "fsc": fsc,
            }
        )
    return MetricsReport(per_class=per_class, miou=miou(per_class), class_names=class_names)


def miou(per_class: List[Dict[str, Optional[float]]]) -> Optional[float]:
    """Arithmetic mean of the defined per-class IoUs."""
    ious = [m["iou"] for m in per_class if m["iou"] is not None]
    return float(np.mean(ious)) if ious else None


def max_f_and_ap(
    prob_map: np.ndarray,
    gt_binary: np.ndarray,
    ignore_mask: Optional[np.ndarray] = None,
):
    """Threshold-sweep MaxF and 11-point interpolated AP for a probability map.

    Thresholds are i/255 for i in 0..255 with prediction positive when
    prob >= threshold. With no positive ground truth both values are
    undefined and returned as None.
    """
    prob = np.asarray(prob_map, dtype=np.float64).ravel()
    gt = np.asarray(gt_binary).astype(bool).ravel()
    if prob.shape != gt.shape:
        raise InputError("probability map and ground truth must have the same size")
    if np.any(prob < 0) or np.any(prob > 1):
        raise InputError("probabilities must lie in [0, 1]")
    if ignore_mask is not None:
        keep = ~np.asarray(ignore_mask).astype(bool).ravel()
        prob, gt = prob[keep], gt[keep]

    n_pos = int(gt.sum())
    if n_pos == 0:
        return None, None

    pred = prob[None, :] >= THRESHOLDS[:, None]  # (256, P)
    tp = (pred & gt[None, :]).sum(axis=1)
    fp = (pred & ~gt[None, :]).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), np.nan)
        recall = tp / n_pos

    f_scores = []
    for p, r in zip(precision, recall):
        if np.isnan(p) or p + r == 0:
            continue
        f_scores.append(2 * p * r / (p + r))
    max_f = float(max(f_scores)) if f_scores else None

    interp = []
    for level in AP_RECALL_LEVELS:
        sel = (recall >= level) & ~np.isnan(precision)
        interp.append(float(precision[sel].max()) if sel.any() else 0.0)
    ap = float(np.mean(interp))
    return max_f, ap


def format_report(report: MetricsReport) -> str:
    """One key-value block per class plus aggregates, mirroring the CLI output."""
    lines = []
    names = report.class_names or [f"class_{c}" for c in range(len(report.per_class))]
    for name, m in zip(names, report.per_class):
        lines.append(f"[{name}]")
        for key in METRIC_NAMES:
            val = m[key]
            lines.append(f"  {key} = {'undefined' if val is None else f'{val:.4f}'}")
    lines.append("[aggregate]")
    lines.append(f"  miou = {'undefined' if report.miou is None else f'{report.miou:.4f}'}")
    if report.max_f is not None:
        lines.append(f"  max_f = {report.max_f:.4f}")
    if report.ap is not None:
        lines.append(f"  ap = {report.ap:.4f}")
    return "\n".join(lines) + "\n"
