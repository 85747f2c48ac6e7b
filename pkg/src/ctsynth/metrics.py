"""Binary classification metrics: confusion counts, ROC, trapezoidal AUC.

The ROC curve steps through score thresholds from high to low; tied
scores move along a single diagonal segment so the trapezoidal area
equals the pairwise probability P(score_pos > score_neg) with ties
counted as one half.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricsError(ValueError):
    """Degenerate metric inputs (empty or single-class)."""


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    roc_points: list[tuple[float, float]] = field(default_factory=list)

    @property
    def n_pos(self) -> int:
        return self.tp + self.fn

    @property
    def n_neg(self) -> int:
        return self.tn + self.fp

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


def _check_binary(labels: np.ndarray) -> tuple[int, int]:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise MetricsError("no samples")
    if not np.isin(labels, (0, 1)).all():
        raise MetricsError("labels must be 0 or 1")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricsError(
            f"both classes required for ranking metrics (got {n_pos} pos, {n_neg} neg)"
        )
    return n_pos, n_neg


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) points from (0, 0) to (1, 1), one per distinct score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricsError("scores and labels must have the same shape")
    if not np.isfinite(scores).all():
        raise MetricsError("scores must be finite")
    n_pos, n_neg = _check_binary(labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    l = labels[order].astype(np.int64)
    tps = np.cumsum(l)
    fps = np.cumsum(1 - l)
    # one point per tie group boundary
    boundary = np.nonzero(np.diff(s))[0].tolist() + [len(s) - 1]
    points = [(0.0, 0.0)]
    for i in boundary:
        points.append((fps[i] / n_neg, tps[i] / n_pos))
    return points


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve."""
    points = roc_curve(scores, labels)
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return float(area)


def confusion_counts(predictions, labels) -> tuple[int, int, int, int]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise MetricsError("predictions and labels must have the same shape")
    if labels.size == 0:
        raise MetricsError("no samples")
    for arr in (predictions, labels):
        if not np.isin(arr, (0, 1)).all():
            raise MetricsError("predictions and labels must be 0 or 1")
    tp = int(((predictions == 1) & (labels == 1)).sum())
    fp = int(((predictions == 1) & (labels == 0)).sum())
    tn = int(((predictions == 0) & (labels == 0)).sum())
    fn = int(((predictions == 0) & (labels == 1)).sum())
    return tp, fp, tn, fn


def accuracy_score(predictions, labels) -> float:
    tp, fp, tn, fn = confusion_counts(predictions, labels)
    return (tp + tn) / (tp + fp + tn + fn)


def report_from_scores(scores, predictions, labels) -> EvalReport:
    """Assemble the evaluation record for one model on one test set."""
    tp, fp, tn, fn = confusion_counts(predictions, labels)
    return EvalReport(
        accuracy=(tp + tn) / (tp + fp + tn + fn),
        auc=roc_auc(scores, labels),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        roc_points=roc_curve(scores, labels),
    )
