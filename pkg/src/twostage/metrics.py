"""ROC analysis, Youden thresholding and confusion-matrix metrics.

All classifiers in this package share one decision rule: a case is
predicted positive iff ``score >= threshold``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ._utils import check_both_classes, sample_sd

METRIC_NAMES = ("auc", "accuracy", "sensitivity", "specificity")


@dataclass(frozen=True)
class RocCurve:
    """Empirical ROC curve.

    ``thresholds`` is strictly decreasing. The first entry is a ``+inf``
    sentinel (sensitivity 0, specificity 1); the last is the smallest observed
    score, where every case is positive (sensitivity 1, specificity 0).
    ``tp`` and ``tn`` are the integer counts behind each point.
    """

    thresholds: np.ndarray
    tp: np.ndarray
    tn: np.ndarray
    positives: int
    negatives: int

    @property
    def sensitivity(self) -> np.ndarray:
        return self.tp / self.positives

    @property
    def specificity(self) -> np.ndarray:
        return self.tn / self.negatives

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.sensitivity.tolist(),
                        self.specificity.tolist()))


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    sensitivity: float
    specificity: float
    auc: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _check_scores(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = check_both_classes(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    return scores, labels


def roc_points(scores, labels) -> RocCurve:
    """Sensitivity/specificity at every distinct score used as a threshold."""
    scores, labels = _check_scores(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    lab = labels[order]
    # last index of each run of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(lab)[ends]
    fp = (ends + 1) - tp
    P = int(labels.sum())
    N = labels.size - P
    return RocCurve(
        thresholds=np.r_[np.inf, s[ends]],
        tp=np.r_[0, tp].astype(np.int64),
        tn=(N - np.r_[0, fp]).astype(np.int64),
        positives=P,
        negatives=N,
    )


def auc_trapezoid(curve: RocCurve) -> float:
    """Trapezoidal area under sensitivity vs (1 - specificity)."""
    fp = curve.negatives - curve.tn
    # integer trapezoids, one division at the end
    area2 = np.sum((fp[1:] - fp[:-1]) * (curve.tp[1:] + curve.tp[:-1]))
    return float(area2) / (2.0 * curve.positives * curve.negatives)


def youden_best(curve: RocCurve) -> tuple[float, float]:
    """Threshold maximizing sensitivity + specificity - 1.

    The ``+inf`` sentinel is excluded. Ties go to the smallest threshold,
    which is the most sensitive choice. J is compared in exact integer form.
    """
    P, N = curve.positives, curve.negatives
    j_scaled = curve.tp[1:] * N + curve.tn[1:] * P - P * N
    best = j_scaled.max()
    # thresholds decrease along the curve, so the last maximizer is the smallest
    idx = int(np.flatnonzero(j_scaled == best)[-1]) + 1
    return float(curve.thresholds[idx]), float(best) / (P * N)


def roc_auc(scores, labels) -> float:
    return auc_trapezoid(roc_points(scores, labels))


def _from_predictions(predicted, labels, auc=None) -> MetricSet:
    tp = int(np.sum(predicted & (labels == 1)))
    tn = int(np.sum(~predicted & (labels == 0)))
    P = int(labels.sum())
    N = labels.size - P
    return MetricSet(
        accuracy=(tp + tn) / labels.size,
        sensitivity=tp / P,
        specificity=tn / N,
        auc=auc,
    )


def confusion_at(scores, labels, threshold: float) -> MetricSet:
    """Accuracy, sensitivity and specificity with ``score >= threshold`` positive."""
    scores, labels = _check_scores(scores, labels)
    return _from_predictions(scores >= threshold, labels)


def evaluate_scores(scores, labels, threshold: float) -> MetricSet:
    """Full :class:`MetricSet` (AUC included) at a fixed threshold."""
    scores, labels = _check_scores(scores, labels)
    return _from_predictions(scores >= threshold, labels, auc=roc_auc(scores, labels))


def cutoff_classify(t_values, labels, cutoff: float) -> MetricSet:
    """WHO-style baseline: a subject is at risk iff its T-value is <= ``cutoff``."""
    t_values = np.asarray(t_values, dtype=float)
    labels = check_both_classes(labels)
    if t_values.shape != labels.shape:
        raise ValueError("t_values and labels differ in shape")
    return _from_predictions(t_values <= cutoff, labels)


def summarize_runs(per_run, fields=None) -> dict[str, tuple[float, float]]:
    """Mean and sample SD (n - 1) of each metric across runs.

    ``per_run`` holds :class:`MetricSet` objects or plain mappings. ``None``
    and NaN entries (undefined values) are skipped; a field with no defined
    value summarizes to ``(nan, nan)``.
    """
    rows = [r.as_dict() if isinstance(r, MetricSet) else dict(r) for r in per_run]
    if not rows:
        raise ValueError("summarize_runs needs at least one run")
    if fields is None:
        # metrics never computed (e.g. auc on a confusion-only MetricSet) are left out
        fields = [k for k in rows[0]
                  if not isinstance(rows[0][k], str) and any(r.get(k) is not None for r in rows)]
    out = {}
    for field in fields:
        vals = [float(r[field]) for r in rows if r.get(field) is not None]
        vals = [v for v in vals if not math.isnan(v)]
        if not vals:
            out[field] = (math.nan, math.nan)
        else:
            out[field] = (math.fsum(vals) / len(vals), sample_sd(vals))
    return out
