"""ROC/AUC against the pairwise-comparison oracle, confusion counts."""

import numpy as np
import pytest

from ctsynth.metrics import (
    MetricsError,
    accuracy_score,
    confusion_counts,
    report_from_scores,
    roc_auc,
    roc_curve,
)


def oracle_pairwise_auc(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie), by explicit enumeration."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def oracle_confusion(preds, labels):
    tp = fp = tn = fn = 0
    for p, t in zip(preds, labels):
        if p == 1 and t == 1:
            tp += 1
        elif p == 1 and t == 0:
            fp += 1
        elif p == 0 and t == 0:
            tn += 1
        else:
            fn += 1
    return tp, fp, tn, fn


class TestAuc:
    def test_perfect_ranking(self):
        scores = [0.9, 0.8, 0.2, 0.1]
        labels = [1, 1, 0, 0]
        assert roc_auc(scores, labels) == 1.0

    def test_reversed_ranking(self):
        scores = [0.1, 0.2, 0.8, 0.9]
        labels = [1, 1, 0, 0]
        assert roc_auc(scores, labels) == 0.0

    def test_all_tied_scores(self):
        assert roc_auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == pytest.approx(0.5)

    def test_matches_pairwise_oracle(self, rng):
        for trial in range(30):
            n = int(rng.integers(6, 40))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            if trial % 2:
                scores = rng.normal(size=n)  # continuous, no ties
            else:
                scores = rng.integers(0, 4, size=n).astype(float)  # heavy ties
            got = roc_auc(scores, labels)
            want = oracle_pairwise_auc(scores, labels)
            assert got == pytest.approx(want, abs=1e-12)

    def test_curve_endpoints_and_monotonicity(self, rng):
        labels = rng.integers(0, 2, size=25)
        labels[0], labels[1] = 0, 1
        scores = rng.normal(size=25)
        pts = roc_curve(scores, labels)
        assert pts[0] == (0.0, 0.0)
        assert pts[-1] == (1.0, 1.0)
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        assert all(b >= a for a, b in zip(xs, xs[1:]))
        assert all(b >= a for a, b in zip(ys, ys[1:]))

    def test_single_class_rejected(self):
        with pytest.raises(MetricsError):
            roc_auc([0.1, 0.2], [1, 1])
        with pytest.raises(MetricsError):
            roc_auc([], [])

    def test_non_finite_scores_rejected(self):
        with pytest.raises(MetricsError):
            roc_auc([0.1, float("nan")], [0, 1])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(MetricsError):
            roc_auc([0.1, 0.2, 0.3], [0, 1])


class TestConfusion:
    def test_matches_loop_oracle(self, rng):
        for _ in range(10):
            n = int(rng.integers(4, 50))
            preds = rng.integers(0, 2, size=n)
            labels = rng.integers(0, 2, size=n)
            assert confusion_counts(preds, labels) == oracle_confusion(preds, labels)

    def test_accuracy_from_counts(self, rng):
        preds = rng.integers(0, 2, size=40)
        labels = rng.integers(0, 2, size=40)
        tp, fp, tn, fn = confusion_counts(preds, labels)
        assert accuracy_score(preds, labels) == pytest.approx((tp + tn) / 40)

    def test_non_binary_rejected(self):
        with pytest.raises(MetricsError):
            confusion_counts([0, 2], [0, 1])


class TestReport:
    def test_counts_partition_the_samples(self, rng):
        labels = np.array([0, 0, 0, 1, 1, 1, 1])
        scores = rng.normal(size=7)
        preds = (scores > 0).astype(int)
        rep = report_from_scores(scores, preds, labels)
        assert rep.tp + rep.fp + rep.tn + rep.fn == 7
        assert rep.n_pos == 4
        assert rep.n_neg == 3
        assert 0.0 <= rep.accuracy <= 1.0
        assert 0.0 <= rep.auc <= 1.0
        d = rep.to_dict()
        assert d["n_pos"] == 4 and d["tp"] == rep.tp
