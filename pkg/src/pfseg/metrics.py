"""Confusion-matrix segmentation metrics.

``counts[g, p]`` is the number of evaluated pixels with ground truth ``g``
and prediction ``p``.  Void ground-truth pixels never enter the matrix.
Per-class means skip classes that are absent (zero row sum for accuracy,
zero union for IoU).
"""

from __future__ import annotations

import csv
import io
from typing import Dict, List, Optional, Sequence

import numpy as np

VOID = 255


class EmptyMatrixError(ValueError):
    """A metric was requested before any pixel was evaluated."""


class ConfusionMatrix:
    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt, void: int = VOID) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        c = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= c):
            raise ValueError(f"predictions must lie in [0, {c}); void is not a valid prediction")
        keep = gt != void
        g = gt[keep].astype(np.int64)
        if g.size and (g.min() < 0 or g.max() >= c):
            raise ValueError(f"ground truth contains ids outside [0, {c}) that are not void")
        self.counts += np.bincount(g * c + pred[keep].astype(np.int64), minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __repr__(self) -> str:
        return f"ConfusionMatrix(num_classes={self.num_classes}, total={self.total})"


def _require_pixels(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise EmptyMatrixError("confusion matrix is empty; no pixels were evaluated")


def global_accuracy(cm: ConfusionMatrix) -> float:
    _require_pixels(cm)
    return float(np.trace(cm.counts) / cm.total)


def per_class_accuracy(cm: ConfusionMatrix) -> np.ndarray:
    """Recall per class; NaN for classes absent from the ground truth."""
    rows = cm.counts.sum(axis=1)
    out = np.full(cm.num_classes, np.nan)
    present = rows > 0
    out[present] = np.diag(cm.counts)[present] / rows[present]
    return out


def class_accuracy(cm: ConfusionMatrix) -> float:
    _require_pixels(cm)
    return float(np.nanmean(per_class_accuracy(cm)))


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN where the union is empty."""
    tp = np.diag(cm.counts)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    out = np.full(cm.num_classes, np.nan)
    ok = union > 0
    out[ok] = tp[ok] / union[ok]
    return out


def mean_iou(cm: ConfusionMatrix) -> float:
    _require_pixels(cm)
    return float(np.nanmean(per_class_iou(cm)))


def grouped_accuracy(cm: ConfusionMatrix, groups: Sequence[str]) -> Dict[str, float]:
    """Pixel-weighted accuracy over the ground-truth pixels of each group.

    ``groups[c]`` names the group of class ``c``.  Groups without pixels are
    left out of the result.
    """
    if len(groups) != cm.num_classes:
        raise ValueError(f"need a group for each of {cm.num_classes} classes, got {len(groups)}")
    diag = np.diag(cm.counts)
    rows = cm.counts.sum(axis=1)
    out = {}
    for name in dict.fromkeys(groups):
        sel = np.array([gname == name for gname in groups])
        denom = rows[sel].sum()
        if denom > 0:
            out[name] = float(diag[sel].sum() / denom)
    return out


# ---------------------------------------------------------------------------
# reports


class MetricsReport:
    """Summary numbers plus per-class rows, serialisable to CSV."""

    COLUMNS = ("name", "accuracy", "iou", "pixels")

    def __init__(self, cm: ConfusionMatrix, class_names: Sequence[str], groups: Sequence[str]):
        self.cm = cm
        self.class_names = list(class_names)
        self.groups = list(groups)
        self.per_class_accuracy = per_class_accuracy(cm)
        self.per_class_iou = per_class_iou(cm)
        self.global_accuracy = global_accuracy(cm)
        self.class_accuracy = class_accuracy(cm)
        self.mean_iou = mean_iou(cm)
        self.grouped = grouped_accuracy(cm, groups)

    def summary(self) -> Dict[str, Optional[float]]:
        return {
            "global": self.global_accuracy,
            "class": self.class_accuracy,
            "miou": self.mean_iou,
            "static": self.grouped.get("static"),
            "dynamic": self.grouped.get("dynamic"),
        }

    def rows(self) -> List[tuple]:
        pixels = self.cm.counts.sum(axis=1)
        out = [
            (name, self.per_class_accuracy[i], self.per_class_iou[i], int(pixels[i]))
            for i, name in enumerate(self.class_names)
        ]
        grp_pixels = {g: int(sum(pixels[i] for i, gi in enumerate(self.groups) if gi == g)) for g in ("static", "dynamic")}
        out += [
            ("global", self.global_accuracy, float("nan"), self.cm.total),
            ("class_mean", self.class_accuracy, float("nan"), self.cm.total),
            ("miou", float("nan"), self.mean_iou, self.cm.total),
            ("static", self.grouped.get("static", float("nan")), float("nan"), grp_pixels["static"]),
            ("dynamic", self.grouped.get("dynamic", float("nan")), float("nan"), grp_pixels["dynamic"]),
        ]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for name, acc, iou, pix in self.rows():
            w.writerow((name, _fmt(acc), _fmt(iou), pix))
        return buf.getvalue()


def _fmt(x: float) -> str:
    return "" if x is None or np.isnan(x) else f"{x:.6f}"


def read_metrics_csv(text: str) -> Dict[str, dict]:
    rows = {}
    for rec in csv.DictReader(io.StringIO(text)):
        rows[rec["name"]] = {
            "accuracy": float(rec["accuracy"]) if rec["accuracy"] else None,
            "iou": float(rec["iou"]) if rec["iou"] else None,
            "pixels": int(rec["pixels"]),
        }
    return rows
