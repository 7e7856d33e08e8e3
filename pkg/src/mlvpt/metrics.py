"""Multi-label evaluation: mAP plus overall and per-class precision/recall/F1."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np


@dataclass
class EvalResult:
    CP: float
    CR: float
    CF1: float
    OP: float
    OR: float
    OF1: float
    threshold: float
    mAP: Optional[float] = None
    per_class_AP: list[float] = field(default_factory=list)
    excluded_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_AP"] = [None if np.isnan(v) else v for v in self.per_class_AP]
        return d


def _check(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 2:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal 2-D shapes")
    return s, (y > 0).astype(np.int64)


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=den > 0)


def threshold_metrics(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> EvalResult:
    """OP/OR/OF1 pool counts over classes; CP/CR average per-class ratios.

    A class whose ratio has a zero denominator contributes 0 to the average.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    s, y = _check(scores, labels)
    pred = (s >= threshold).astype(np.int64)
    tp = (pred * y).sum(axis=0)
    fp = (pred * (1 - y)).sum(axis=0)
    fn = ((1 - pred) * y).sum(axis=0)
    OP = float(tp.sum() / (tp.sum() + fp.sum())) if tp.sum() + fp.sum() else 0.0
    OR = float(tp.sum() / (tp.sum() + fn.sum())) if tp.sum() + fn.sum() else 0.0
    # fsum: correctly rounded, so the value does not depend on summation order
    CP = math.fsum(_ratio(tp, tp + fp)) / len(tp)
    CR = math.fsum(_ratio(tp, tp + fn)) / len(tp)
    return EvalResult(CP=CP, CR=CR, CF1=_f1(CP, CR), OP=OP, OR=OR, OF1=_f1(OP, OR), threshold=threshold)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Non-interpolated AP; ties in score are ranked by ascending index."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0
    n_pos = int(y.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, n_pos + 1) / ranks
    return math.fsum(precision_at_hits) / n_pos


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Return ``(mAP, per_class_AP)``; classes without positives get NaN and are skipped."""
    s, y = _check(scores, labels)
    ap = np.array([average_precision(s[:, k], y[:, k]) for k in range(s.shape[1])])
    valid = ~np.isnan(ap)
    if not valid.any():
        raise ValueError("mAP undefined: no class has a positive example")
    return math.fsum(ap[valid]) / int(valid.sum()), ap


def evaluate(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> EvalResult:
    res = threshold_metrics(scores, labels, threshold)
    mAP, ap = mean_average_precision(scores, labels)
    res.mAP = mAP
    res.per_class_AP = ap.tolist()
    res.excluded_classes = np.flatnonzero(np.isnan(ap)).tolist()
    return res


def false_positive_rate(scores: np.ndarray, labels: np.ndarray, cls: int, threshold: float = 0.5) -> float:
    """Fraction of negatives of class ``cls`` predicted positive."""
    s, y = _check(scores, labels)
    neg = y[:, cls] == 0
    if not neg.any():
        return 0.0
    return float((s[neg, cls] >= threshold).mean())
