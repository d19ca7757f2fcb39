import json

import numpy as np
import pytest

from ctnodule import classifiers as clf
from ctnodule import metrics
from ctnodule.errors import EmptyEvaluation, LengthMismatch, SingleClassInput
from ctnodule.metrics import ConfusionCounts


def mann_whitney_auc(scores, labels):
    """Pairwise concordance statistic with ties counted 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestConfusionCounts:
    def test_perfect(self):
        c = metrics.confusion_counts([1, 0, 1, 0], [1, 0, 1, 0])
        assert (c.tp, c.tn, c.fp, c.fn) == (2, 2, 0, 0)

    def test_fully_wrong(self):
        labels = np.array([1, 0, 1, 0, 1])
        c = metrics.confusion_counts(1 - labels, labels)
        assert c.tp == 0 and c.tn == 0
        assert c.fp + c.fn == 5

    def test_random_case_hand_tally(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 2, 20)
        labels = rng.integers(0, 2, 20)
        c = metrics.confusion_counts(preds, labels)
        tally = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
        for p, y in zip(preds, labels):
            key = ("t" if p == y else "f") + ("p" if p == 1 else "n")
            tally[key] += 1
        assert (c.tp, c.fp, c.tn, c.fn) == (
            tally["tp"], tally["fp"], tally["tn"], tally["fn"]
        )
        assert c.total == 20

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            metrics.confusion_counts([1, 0], [1])


class TestMetricsFromCounts:
    def test_symmetric_nine_tenths(self):
        acc, prec, rec, f1 = metrics.metrics_from_counts(ConfusionCounts(9, 1, 9, 1))
        assert acc == prec == rec == f1 == 0.9

    def test_knn_row_f1(self):
        # published precision/recall pair reproduces the published F1
        p, r = 0.9964, 0.7932
        f1 = 2 * p * r / (p + r)
        assert f1 == pytest.approx(0.8833, abs=0.0005)

    def test_dt_row_f1(self):
        p, r = 0.6621, 0.5439
        f1 = 2 * p * r / (p + r)
        assert f1 == pytest.approx(0.5972, abs=0.0005)

    def test_degenerate_cases_are_zero(self):
        acc, prec, rec, f1 = metrics.metrics_from_counts(ConfusionCounts(0, 0, 5, 0))
        assert acc == 1.0 and prec == 0.0 and rec == 0.0 and f1 == 0.0

    def test_empty(self):
        with pytest.raises(EmptyEvaluation):
            metrics.metrics_from_counts(ConfusionCounts(0, 0, 0, 0))


class TestRocAuc:
    def test_perfect_separation(self):
        auc, _ = metrics.roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert auc == 1.0

    def test_worked_example(self):
        # 3 of 4 (pos, neg) pairs concordant
        auc, _ = metrics.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert auc == pytest.approx(0.75, abs=1e-12)

    def test_all_ties(self):
        auc, _ = metrics.roc_auc([0.5] * 10, [1, 0] * 5)
        assert auc == pytest.approx(0.5, abs=1e-12)

    def test_single_class(self):
        with pytest.raises(SingleClassInput):
            metrics.roc_auc([0.1, 0.2], [1, 1])

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_mann_whitney(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 40))
        scores = np.round(rng.uniform(size=n), 1)  # coarse grid forces ties
        labels = np.zeros(n, dtype=np.intp)
        labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
        if labels.all() or not labels.any():
            labels[0] = 1 - labels[0]
        auc, _ = metrics.roc_auc(scores, labels)
        assert auc == pytest.approx(mann_whitney_auc(scores, labels), abs=1e-9)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=50)
        labels = rng.integers(0, 2, 50)
        labels[0], labels[1] = 0, 1
        base, _ = metrics.roc_auc(scores, labels)
        for transform in (np.exp, lambda s: 3.0 * s + 11.0):
            auc, _ = metrics.roc_auc(transform(scores), labels)
            assert auc == pytest.approx(base, abs=1e-12)

    def test_curve_shape(self):
        rng = np.random.default_rng(2)
        scores = rng.uniform(size=30)
        labels = rng.integers(0, 2, 30)
        labels[0], labels[1] = 0, 1
        _, points = metrics.roc_auc(scores, labels)
        fprs = [p[0] for p in points]
        tprs = [p[1] for p in points]
        assert points[0][:2] == (0.0, 0.0) and points[-1][:2] == (1.0, 1.0)
        assert all(b >= a for a, b in zip(fprs, fprs[1:]))
        assert all(b >= a for a, b in zip(tprs, tprs[1:]))


class TestEvaluate:
    def test_tree_memorizes_own_training_set(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(60, 4))
        y = rng.integers(0, 2, 60)
        y[0], y[1] = 0, 1
        model = clf.fit_decision_tree(x, y)
        report = metrics.evaluate(lambda f: clf.predict_tree(model, f), x, y)
        assert report.accuracy == 1.0

    def test_random_scores_near_half_auc(self):
        rng = np.random.default_rng(4)
        n = 2000
        labels = np.repeat([0, 1], n // 2)
        scores = rng.uniform(size=n)
        report = metrics.evaluate(
            lambda i: (int(scores[int(i)] >= 0.5), float(scores[int(i)])),
            np.arange(n, dtype=np.float64),
            labels,
        )
        assert abs(report.auc - 0.5) < 0.05

    def test_single_class_test_set(self):
        report = metrics.evaluate(
            lambda f: (1, 0.9), np.zeros((5, 2)), np.ones(5, dtype=np.intp)
        )
        assert report.auc is None
        assert report.roc_points == ()
        assert report.accuracy == 1.0

    def test_accuracy_invariant_under_relabeling(self):
        rng = np.random.default_rng(5)
        preds = rng.integers(0, 2, 40)
        labels = rng.integers(0, 2, 40)
        acc1, *_ = metrics.metrics_from_counts(metrics.confusion_counts(preds, labels))
        acc2, *_ = metrics.metrics_from_counts(
            metrics.confusion_counts(1 - preds, 1 - labels)
        )
        assert acc1 == acc2


class TestEmission:
    def report(self):
        scores = [0.9, 0.8, 0.3, 0.1]
        labels = [1, 1, 0, 0]
        return metrics.evaluate(
            lambda i: (int(scores[int(i)] >= 0.5), scores[int(i)]),
            np.arange(4, dtype=np.float64),
            np.asarray(labels),
        )

    def test_json_fields(self):
        doc = json.loads(self.report().to_json())
        assert doc["accuracy"] == 1.0
        assert doc["percent"]["accuracy"] == "100.00"
        assert doc["counts"] == {"tp": 2, "fp": 0, "tn": 2, "fn": 0}
        assert doc["roc_points"][0][2] == "inf"
        assert doc["roc_points"][-1][2] == "-inf"

    def test_roc_csv(self):
        text = metrics.roc_to_csv(self.report().roc_points)
        lines = text.splitlines()
        assert lines[0] == "threshold,fpr,tpr"
        assert len(lines) == len(self.report().roc_points) + 1

    def test_svg_is_self_contained(self):
        svg = metrics.roc_to_svg(self.report().roc_points)
        assert svg.startswith("<svg")
        assert "polyline" in svg and svg.rstrip().endswith("</svg>")
