"""Classification metrics, ROC/AUC, and attention-based localization with IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import cv2
import numpy as np

from .dataset import Box


def confusion(labels: Sequence[int], predictions: Sequence[int], k: int) -> np.ndarray:
    """K x K counts, rows = ground truth, columns = prediction."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    if labels.shape != predictions.shape:
        raise ValueError("labels and predictions differ in length")
    for arr in (labels, predictions):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"value out of range for {k} classes")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


@dataclass
class BinaryCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _ratio(num: float, den: float) -> float:
    return num / den if den else math.nan


def binary_metrics(c: BinaryCounts) -> dict[str, float]:
    return {
        "acc": _ratio(c.tp + c.tn, c.total),
        "sen": _ratio(c.tp, c.tp + c.fn),
        "spc": _ratio(c.tn, c.tn + c.fp),
        "f1": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
    }


def one_vs_rest(cm: np.ndarray) -> list[BinaryCounts]:
    cm = np.asarray(cm)
    total = int(cm.sum())
    out = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        out.append(BinaryCounts(tp, total - tp - fn - fp, fp, fn))
    return out


@dataclass
class ClassMetrics:
    per_class: list[dict[str, float]]
    macro: dict[str, float]
    multiclass_accuracy: float
    undefined: list[tuple[int, str]] = field(default_factory=list)

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict:
        names = list(class_names) if class_names else [str(i) for i in range(len(self.per_class))]
        clean = lambda d: {k: (None if math.isnan(v) else v) for k, v in d.items()}
        return {
            "macro_one_vs_rest": clean(self.macro),
            "multiclass_accuracy": self.multiclass_accuracy,
            "per_class": {n: clean(m) for n, m in zip(names, self.per_class)},
            "undefined": [[names[c], m] for c, m in self.undefined],
        }


def per_class_metrics(cm: np.ndarray) -> ClassMetrics:
    """One-vs-rest ACC/SEN/SPC/F1 per class and their unweighted macro mean.

    Cells with a zero denominator are NaN, listed in ``undefined`` and left
    out of the macro mean. ``multiclass_accuracy`` is trace / total.
    """
    cm = np.asarray(cm)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    per_class = [binary_metrics(c) for c in one_vs_rest(cm)]
    undefined = [(c, m) for c, d in enumerate(per_class) for m, v in d.items() if math.isnan(v)]
    macro = {}
    for m in ("acc", "sen", "spc", "f1"):
        vals = [d[m] for d in per_class if not math.isnan(d[m])]
        macro[m] = float(np.mean(vals)) if vals else math.nan
    return ClassMetrics(per_class, macro, float(np.trace(cm)) / total, undefined)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """ROC with one threshold per distinct score (ties move together) and trapezoidal AUC.

    The first point is (0, 0) at threshold +inf.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = (last_of_group + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)


def macro_auc(probabilities: np.ndarray, labels: Sequence[int]) -> tuple[float, list[float | None]]:
    """One-vs-rest AUC per class (None where a class is absent or universal) and their mean."""
    probabilities = np.asarray(probabilities)
    labels = np.asarray(labels)
    per = []
    for c in range(probabilities.shape[1]):
        y = labels == c
        per.append(roc_auc(probabilities[:, c], y).auc if 0 < y.sum() < y.size else None)
    vals = [v for v in per if v is not None]
    return (float(np.mean(vals)) if vals else math.nan), per


# ---------------------------------------------------------------------------
# localization


def _as_mask(region: np.ndarray | Box, shape: tuple[int, int] | None) -> np.ndarray:
    if isinstance(region, Box):
        if shape is None:
            raise ValueError("a frame shape is needed to rasterize a box against a box")
        return region.to_mask(shape)
    return np.asarray(region, dtype=bool)


def iou(a: np.ndarray | Box, b: np.ndarray | Box, shape: tuple[int, int] | None = None) -> float:
    """|a & b| / |a | b| with pixel-count semantics; 0 when both are empty.

    Boxes are half-open; two boxes are compared analytically unless ``shape``
    is given, in which case they are clipped to that frame.
    """
    if isinstance(a, Box) and isinstance(b, Box) and shape is None:
        inter = Box(max(a.x0, b.x0), max(a.y0, b.y0), min(a.x1, b.x1), min(a.y1, b.y1)).area
        union = a.area + b.area - inter
        return inter / union if union else 0.0
    if shape is None:
        shape = (b if isinstance(a, Box) else a).shape
    ma, mb = _as_mask(a, shape), _as_mask(b, shape)
    if ma.shape != mb.shape:
        raise ValueError("regions are in different frames")
    union = int(np.logical_or(ma, mb).sum())
    return int(np.logical_and(ma, mb).sum()) / union if union else 0.0


@dataclass
class LocalizationResult:
    heatmap: np.ndarray
    mask: np.ndarray
    box: Box | None
    threshold: float
    iou: float | None = None


def attention_heatmap(attention: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Sum over maps, min-max normalize, bilinear upsample. All-zero -> zeros."""
    summed = np.asarray(attention, dtype=np.float64).sum(axis=0)
    lo, hi = summed.min(), summed.max()
    if hi <= 0:
        norm = np.zeros_like(summed)
    elif hi == lo:
        norm = np.ones_like(summed)
    else:
        norm = (summed - lo) / (hi - lo)
    h, w = image_size
    up = cv2.resize(norm.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
    return np.clip(up, 0.0, 1.0)


def localize(attention: np.ndarray, image_size: tuple[int, int], threshold: float = 0.5,
             truth: np.ndarray | Box | None = None, use_box: bool = True) -> LocalizationResult:
    """Threshold the upsampled attention heatmap (pixels >= threshold).

    An all-zero stack yields an empty mask. If ``truth`` is given, the IoU
    of the predicted box (or mask, with ``use_box=False``) is attached.
    """
    heat = attention_heatmap(attention, image_size)
    if np.asarray(attention).max() <= 0:
        mask = np.zeros(image_size, dtype=bool)
    else:
        mask = heat >= threshold
    box = Box.from_mask(mask)
    result = LocalizationResult(heat, mask, box, float(threshold))
    if truth is not None:
        truth_box = Box.from_mask(truth) if isinstance(truth, np.ndarray) else truth
        if use_box:
            result.iou = iou(box, truth_box) if box is not None and truth_box is not None else 0.0
        else:
            result.iou = iou(mask, truth, image_size)
    return result


@dataclass
class MetricsReport:
    classes: list[str]
    confusion: np.ndarray
    metrics: ClassMetrics
    auc_macro: float
    auc_per_class: list[float | None]
    n: int

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "n": self.n,
            "confusion": self.confusion.tolist(),
            **self.metrics.to_dict(self.classes),
            "auc_macro_one_vs_rest": None if math.isnan(self.auc_macro) else self.auc_macro,
            "auc_per_class": dict(zip(self.classes, self.auc_per_class)),
        }


def build_report(labels: Sequence[int], probabilities: np.ndarray, classes: Sequence[str]) -> MetricsReport:
    probabilities = np.asarray(probabilities)
    labels = np.asarray(labels)
    k = len(classes)
    cm = confusion(labels, probabilities.argmax(axis=1), k)
    auc, per = macro_auc(probabilities, labels)
    return MetricsReport(list(classes), cm, per_class_metrics(cm), auc, per, int(labels.size))


def summarize_folds(reports: Sequence[MetricsReport]) -> dict:
    """Mean and (population) standard deviation of headline metrics across folds."""
    rows = {
        "multiclass_accuracy": [r.metrics.multiclass_accuracy for r in reports],
        "acc": [r.metrics.macro["acc"] for r in reports],
        "sen": [r.metrics.macro["sen"] for r in reports],
        "spc": [r.metrics.macro["spc"] for r in reports],
        "f1": [r.metrics.macro["f1"] for r in reports],
        "auc": [r.auc_macro for r in reports],
    }
    out = {}
    for name, vals in rows.items():
        vals = [v for v in vals if not math.isnan(v)]
        out[name] = {"mean": float(np.mean(vals)) if vals else None,
                     "std": float(np.std(vals)) if vals else None}
    return out
