"""Confusion counts, F1, support-weighted F1 and AUROC."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .labels import CLASSIFY_LABELS, NO_ANSWER, POLYP, POLYP_CODES, PathologyClass, TWO_OPTIONS


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def support(self) -> int:
        return self.tp + self.fn

    @property
    def sensitivity(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def specificity(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def f1(c: ConfusionCounts) -> float:
    """``2tp / (2tp + fp + fn)``, or 0 when the denominator is 0."""
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 0.0


def point_auroc(c: ConfusionCounts) -> float:
    """Balanced accuracy: the ROC area through a single operating point."""
    if c.tp + c.fn == 0 or c.tn + c.fp == 0:
        raise ValueError(f"point AUROC undefined without both positives and negatives: {c}")
    return (c.sensitivity + c.specificity) / 2


def _label(x) -> str:
    return x.value if isinstance(x, PathologyClass) else str(x)


def binary_counts(
    preds: Sequence[str],
    truths: Sequence[bool],
    positive: str = POLYP,
    no_answer: str = "negative",
) -> ConfusionCounts:
    """Detection counts. ``no_answer="negative"`` scores No-A as a negative call;
    ``"exclude"`` drops those items."""
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(truths)} truths")
    if no_answer not in ("negative", "exclude"):
        raise ValueError("no_answer must be 'negative' or 'exclude'")
    tp = fp = tn = fn = 0
    for p, t in zip(preds, truths):
        if p in (NO_ANSWER, TWO_OPTIONS) and no_answer == "exclude":
            continue
        hit = p == positive
        if t and hit:
            tp += 1
        elif t:
            fn += 1
        elif hit:
            fp += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, tn, fn)


@dataclass
class ClassResult:
    counts: ConfusionCounts
    f1: float


@dataclass
class MulticlassReport:
    per_class: dict[str, ClassResult]
    supports: dict[str, int]
    weighted_f1: float
    full_matrix: dict[tuple[str, str], int] = field(default_factory=dict)
    pred_labels: tuple[str, ...] = CLASSIFY_LABELS
    truth_labels: tuple[str, ...] = tuple(c.value for c in PathologyClass)

    def matrix_array(self) -> np.ndarray:
        """Rows = predicted label, columns = true label."""
        return np.array([[self.full_matrix.get((p, t), 0) for t in self.truth_labels] for p in self.pred_labels])

    def to_dict(self) -> dict:
        return {
            "per_class": {k: {**v.counts.to_dict(), "f1": v.f1} for k, v in self.per_class.items()},
            "supports": dict(self.supports),
            "weighted_f1": self.weighted_f1,
            "pred_labels": list(self.pred_labels),
            "truth_labels": list(self.truth_labels),
            "full_matrix": self.matrix_array().tolist(),
        }


def one_vs_all(
    preds: Sequence[str],
    truths: Sequence[PathologyClass | str],
    classes: Sequence[str] = POLYP_CODES,
) -> MulticlassReport:
    """Per-class binary counts. No-A and 2OP predictions are misses for the true
    class and never positives for any class."""
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(truths)} truths")
    preds = [_label(p) for p in preds]
    truths = [_label(t) for t in truths]
    n = len(preds)
    per_class, supports = {}, {}
    for c in classes:
        tp = sum(p == c and t == c for p, t in zip(preds, truths))
        fp = sum(p == c and t != c for p, t in zip(preds, truths))
        fn = sum(p != c and t == c for p, t in zip(preds, truths))
        counts = ConfusionCounts(tp, fp, n - tp - fp - fn, fn)
        per_class[c] = ClassResult(counts, f1(counts))
        supports[c] = counts.support
    matrix = Counter(zip(preds, truths))
    pred_labels = tuple(CLASSIFY_LABELS) + tuple(sorted({p for p in preds} - set(CLASSIFY_LABELS)))
    total = sum(supports.values())
    wf1 = weighted_f1({c: r.f1 for c, r in per_class.items()}, supports) if total else 0.0
    return MulticlassReport(per_class, supports, wf1, dict(matrix), pred_labels)


def weighted_f1(per_class_f1: Mapping[str, float], supports: Mapping[str, int]) -> float:
    missing = set(per_class_f1) - set(supports)
    if missing:
        raise ValueError(f"no support given for {sorted(missing)}")
    total = sum(supports[c] for c in per_class_f1)
    if total <= 0:
        raise ValueError("total support is zero")
    return sum(supports[c] * per_class_f1[c] for c in per_class_f1) / total


def roc_curve(scores: Sequence[float], truths: Sequence[bool]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC points (fpr, tpr, thresholds), one point per distinct score plus the origin."""
    tp_c, fp_c, thr = _roc_counts(scores, truths)
    return fp_c / fp_c[-1], tp_c / tp_c[-1], thr


def _roc_counts(scores, truths):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(truths, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and truths must be equal-length 1-D sequences")
    if y.all() or not y.any():
        raise ValueError("AUROC needs both positive and negative truths")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # Last index of each run of tied scores.
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.r_[0, np.cumsum(y)[ends]]
    fp = np.r_[0, np.cumsum(~y)[ends]]
    thr = np.r_[np.inf, s[ends]]
    return tp, fp, thr


def auroc_from_scores(scores: Sequence[float], truths: Sequence[bool]) -> float:
    """Trapezoidal ROC area. Tied scores form one diagonal segment, which counts
    tied positive/negative pairs as one half."""
    tp, fp, _ = _roc_counts(scores, truths)
    # Exact integer trapezoid sum, divided once.
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * int(tp[-1]) * int(fp[-1]))


def relative_change(f1_simple: float, f1_engineered: float) -> Optional[float]:
    """Percent change from the simple-prompt F1; ``None`` when the baseline is 0."""
    if f1_simple == 0:
        return None
    return (f1_engineered - f1_simple) / f1_simple * 100.0


def format_change(change: Optional[float]) -> str:
    return "NA" if change is None else f"{change:+.1f}%"
