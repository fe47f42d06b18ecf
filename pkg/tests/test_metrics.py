import csv
import math

import numpy as np
import pytest

from sisc.errors import DataError
from sisc.metrics import (
    ConfusionCounts,
    RocCurve,
    confusion,
    cv_aggregate,
    format_mean_std,
    metrics,
    roc_auc,
    write_metrics_report,
    write_roc_csv,
)

from oracles import mann_whitney_auc


def enumerate_counts(predicted, actual):
    tp = fp = tn = fn = 0
    for p, a in zip(predicted, actual):
        if p == "malignant" and a == "malignant":
            tp += 1
        elif p == "malignant":
            fp += 1
        elif a == "malignant":
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


class TestConfusion:
    def test_perfect_predictions(self):
        labels = ["benign", "malignant", "malignant", "benign"]
        c = confusion(labels, labels)
        assert (c.fp, c.fn) == (0, 0)
        assert (c.tp, c.tn) == (2, 2)
        assert c.total == 4

    def test_all_malignant_on_balanced_ten(self):
        actual = ["benign", "malignant"] * 5
        c = confusion(["malignant"] * 10, actual)
        assert (c.tp, c.fp, c.tn, c.fn) == (5, 5, 0, 0)

    def test_random_against_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 50))
            pred = ["malignant" if v else "benign" for v in rng.integers(0, 2, n)]
            act = ["malignant" if v else "benign" for v in rng.integers(0, 2, n)]
            c = confusion(pred, act)
            assert (c.tp, c.fp, c.tn, c.fn) == enumerate_counts(pred, act)

    def test_integer_labels_accepted(self):
        c = confusion([1, 0, 1], ["malignant", "benign", "benign"])
        assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 1, 0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(DataError, match="labels"):
            confusion(["benign"], ["benign", "malignant"])

    def test_unknown_label_rejected(self):
        with pytest.raises(DataError, match="excluded"):
            confusion(["excluded"], ["benign"])


class TestMetrics:
    def test_worked_example(self):
        acc, sens, spec = metrics(ConfusionCounts(tp=9, fp=2, tn=8, fn=1))
        assert acc == pytest.approx(0.85)
        assert sens == pytest.approx(0.9)
        assert spec == pytest.approx(0.8)

    def test_perfect_counts(self):
        assert metrics(ConfusionCounts(tp=3, fp=0, tn=7, fn=0)) == (1.0, 1.0, 1.0)

    def test_no_positives_makes_sensitivity_undefined(self):
        acc, sens, spec = metrics(ConfusionCounts(tp=0, fp=1, tn=9, fn=0))
        assert math.isnan(sens)
        assert spec == pytest.approx(0.9)
        assert acc == pytest.approx(0.9)

    def test_no_negatives_makes_specificity_undefined(self):
        _, sens, spec = metrics(ConfusionCounts(tp=5, fp=0, tn=0, fn=5))
        assert math.isnan(spec)
        assert sens == pytest.approx(0.5)

    def test_zero_total_rejected(self):
        with pytest.raises(DataError, match="zero"):
            metrics(ConfusionCounts(tp=0, fp=0, tn=0, fn=0))

    def test_perfect_predictions_compose(self):
        labels = ["benign"] * 4 + ["malignant"] * 6
        assert metrics(confusion(labels, labels)) == (1.0, 1.0, 1.0)


class TestRocAuc:
    def test_perfect_separation(self):
        curve = roc_auc([0.1, 0.2, 0.8, 0.9],
                        ["benign", "benign", "malignant", "malignant"])
        assert curve.auc == pytest.approx(1.0)
        np.testing.assert_array_equal(curve.points[0], [0.0, 0.0])
        np.testing.assert_array_equal(curve.points[-1], [1.0, 1.0])

    def test_all_tied_scores_give_chance(self):
        curve = roc_auc([0.5] * 6, ["benign", "malignant"] * 3)
        assert curve.auc == pytest.approx(0.5)
        # one simultaneous step: straight diagonal
        np.testing.assert_array_equal(curve.points,
                                      [[0.0, 0.0], [1.0, 1.0]])

    def test_matches_mann_whitney_on_random_vectors(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            n = 200
            labels = (rng.random(n) < 0.4).astype(int)
            if labels.min() == labels.max():
                continue
            if trial % 2 == 0:
                scores = rng.normal(size=n)
            else:
                # coarse grid forces heavy ties
                scores = rng.integers(0, 5, n) / 4.0
            curve = roc_auc(scores, labels)
            assert curve.auc == pytest.approx(mann_whitney_auc(scores, labels),
                                              abs=1e-9)

    def test_monotone_staircase(self):
        rng = np.random.default_rng(2)
        scores = rng.random(50)
        labels = rng.integers(0, 2, 50)
        curve = roc_auc(scores, labels)
        diffs = np.diff(curve.points, axis=0)
        assert np.all(diffs >= 0)
        assert 0.0 <= curve.auc <= 1.0

    def test_label_reversal_complements_auc(self):
        rng = np.random.default_rng(3)
        scores = rng.integers(0, 10, 80) / 9.0
        labels = rng.integers(0, 2, 80)
        forward = roc_auc(scores, labels).auc
        flipped = roc_auc(-scores, labels).auc
        assert forward + flipped == pytest.approx(1.0, abs=1e-12)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(4)
        scores = rng.random(60)
        labels = rng.integers(0, 2, 60)
        base = roc_auc(scores, labels)
        warped = roc_auc(np.exp(3.0 * scores), labels)
        assert warped.auc == pytest.approx(base.auc, abs=1e-12)
        np.testing.assert_allclose(warped.points, base.points)

    def test_single_class_rejected(self):
        with pytest.raises(DataError, match="each class"):
            roc_auc([0.1, 0.9], ["benign", "benign"])

    def test_length_mismatch_rejected(self):
        with pytest.raises(DataError, match="match"):
            roc_auc([0.1, 0.9, 0.5], ["benign", "malignant"])

    def test_non_finite_scores_rejected(self):
        with pytest.raises(DataError, match="finite"):
            roc_auc([0.1, np.nan], ["benign", "malignant"])


class TestCvAggregate:
    def test_identical_folds_zero_std(self):
        mean, std = cv_aggregate([0.9, 0.9, 0.9])
        assert mean == pytest.approx(0.9)
        assert std == 0.0

    def test_two_point_formula(self):
        mean, std = cv_aggregate([0.8, 0.9])
        assert mean == pytest.approx(0.85)
        assert std == pytest.approx(0.1 / math.sqrt(2), abs=1e-12)

    def test_matches_textbook_formula(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            values = rng.random(10)
            mean, std = cv_aggregate(values)
            hand_mean = sum(values) / len(values)
            hand_std = math.sqrt(sum((v - hand_mean) ** 2 for v in values)
                                 / (len(values) - 1))
            assert mean == pytest.approx(hand_mean, abs=1e-12)
            assert std == pytest.approx(hand_std, abs=1e-12)

    def test_single_fold_rejected(self):
        with pytest.raises(DataError, match="at least 2"):
            cv_aggregate([0.8])

    def test_single_fold_mean_only(self):
        mean, std = cv_aggregate([0.8], mean_only=True)
        assert mean == pytest.approx(0.8)
        assert math.isnan(std)

    def test_empty_rejected(self):
        with pytest.raises(DataError, match="non-empty"):
            cv_aggregate([])


class TestFormatting:
    def test_table_style_cell(self):
        assert format_mean_std(84.16666, 1.4968) == "84.17±1.50"

    def test_nan_std_drops_suffix(self):
        assert format_mean_std(91.0, float("nan")) == "91.00"


class TestReports:
    def test_metrics_report_layout(self, tmp_path):
        rows = [(0.84, 0.80, 0.88, 0.91),
                (0.86, 0.82, 0.90, 0.93),
                (0.85, 0.81, 0.89, 0.92)]
        path = tmp_path / "metrics.csv"
        write_metrics_report(rows, path)
        with path.open(newline="") as handle:
            table = list(csv.reader(handle))
        assert table[0] == ["fold", "accuracy", "sensitivity",
                            "specificity", "auc"]
        assert len(table) == 5
        assert [r[0] for r in table[1:4]] == ["1", "2", "3"]
        assert float(table[2][1]) == pytest.approx(0.86)
        assert table[4][0] == "mean±std(n-1)"
        mean, std = cv_aggregate([r[0] for r in rows])
        assert table[4][1] == format_mean_std(mean, std)

    def test_single_fold_report_has_plain_mean(self, tmp_path):
        path = tmp_path / "metrics.csv"
        write_metrics_report([(0.8, 0.7, 0.9, 0.95)], path)
        with path.open(newline="") as handle:
            table = list(csv.reader(handle))
        assert table[-1][1] == "0.80"

    def test_empty_report_rejected(self, tmp_path):
        with pytest.raises(DataError, match="at least one"):
            write_metrics_report([], tmp_path / "metrics.csv")

    def test_bad_row_width_rejected(self, tmp_path):
        with pytest.raises(DataError, match="4 metric"):
            write_metrics_report([(0.8, 0.7)], tmp_path / "metrics.csv")

    def test_roc_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        curve = roc_auc(rng.random(40), rng.integers(0, 2, 40))
        path = tmp_path / "roc.csv"
        write_roc_csv(curve, path)
        with path.open(newline="") as handle:
            table = list(csv.reader(handle))
        assert table[0] == ["fpr", "tpr"]
        points = np.array([[float(a), float(b)] for a, b in table[1:]])
        np.testing.assert_allclose(points, curve.points, atol=1e-9)
