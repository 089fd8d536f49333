"""Confusion-count metrics: Dice, Jaccard, balanced accuracy, G-mean.

A ratio whose numerator and denominator are both zero evaluates to 1.0
(empty prediction of an empty structure is a perfect match). Multi-class
reports average over the foreground classes only.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .postprocess import CLASS_NAMES

METRIC_NAMES = ("dice", "jac", "bacc", "gmeans", "sensitivity", "specificity")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(num: float, den: float) -> float:
    return 1.0 if den == 0 else num / den


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, c.fp + c.fn + 2 * c.tp)


def jaccard(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def bacc(c: ConfusionCounts) -> float:
    return (sensitivity(c) + specificity(c)) / 2.0


def gmeans(c: ConfusionCounts) -> float:
    return math.sqrt(sensitivity(c) * specificity(c))


def all_metrics(c: ConfusionCounts) -> dict:
    return {"dice": dice(c), "jac": jaccard(c), "bacc": bacc(c), "gmeans": gmeans(c),
            "sensitivity": sensitivity(c), "specificity": specificity(c)}


@dataclass
class MetricsReport:
    per_class: dict
    macro: dict
    counts: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report(pred_labels: np.ndarray, truth_labels: np.ndarray, classes: int = 3,
           foreground: Optional[Sequence[int]] = None) -> MetricsReport:
    """Per-class metrics of binarised label maps, macro-averaged over foreground."""
    pred_labels = np.asarray(pred_labels)
    truth_labels = np.asarray(truth_labels)
    if pred_labels.shape != truth_labels.shape:
        raise ValueError(f"prediction shape {pred_labels.shape} != ground-truth shape {truth_labels.shape}")
    fg = list(foreground) if foreground is not None else list(range(1, classes))
    per_class, counts = {}, {}
    for c in fg:
        name = CLASS_NAMES.get(c, str(c))
        cc = confusion(pred_labels == c, truth_labels == c)
        per_class[name] = all_metrics(cc)
        counts[name] = asdict(cc)
    macro = {m: float(np.mean([per_class[n][m] for n in per_class])) for m in METRIC_NAMES}
    return MetricsReport(per_class, macro, counts)
