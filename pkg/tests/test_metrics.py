import numpy as np
import pytest

from advids.data import CLASS_NAMES, NUM_CLASSES
from advids.exceptions import DimensionError, DomainError, MetricsError
from advids.metrics import (
    classification_report, confusion_matrix, confusion_to_csv, format_report, report_to_dict,
)
from advids.numerics import Rng


def _brute_force(y_true, y_pred, k):
    """逐类计数的参考实现"""
    precision, recall, f1, support = [], [], [], []
    for c in range(k):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        predicted = sum(1 for p in y_pred if p == c)
        actual = sum(1 for t in y_true if t == c)
        pc = tp / predicted if predicted else 0.0
        rc = tp / actual if actual else 0.0
        precision.append(pc)
        recall.append(rc)
        f1.append(2 * pc * rc / (pc + rc) if pc + rc else 0.0)
        support.append(actual)
    return precision, recall, f1, support


class TestConfusionMatrix:
    """混淆矩阵"""

    def test_diagonal(self):
        labels = list(range(NUM_CLASSES)) * 2
        cm = confusion_matrix(labels, labels)
        assert np.array_equal(cm.counts, 2 * np.eye(NUM_CLASSES, dtype=np.int64))
        assert cm.total == 2 * NUM_CLASSES

    def test_small_registry(self):
        cm = confusion_matrix([0, 0, 1], [0, 1, 1], registry=("a", "b"))
        assert cm.counts.tolist() == [[1, 1], [0, 1]]
        assert list(cm.to_frame().columns) == ["a", "b"]

    def test_errors(self):
        with pytest.raises(DimensionError):
            confusion_matrix([0, 1], [0])
        with pytest.raises(DomainError):
            confusion_matrix([0], [NUM_CLASSES])
        with pytest.raises(DomainError):
            confusion_matrix([-1], [0])

    def test_empty(self):
        cm = confusion_matrix([], [])
        assert cm.total == 0
        with pytest.raises(MetricsError):
            classification_report(cm)


class TestClassificationReport:
    """分类报告"""

    def test_perfect(self):
        labels = list(range(NUM_CLASSES))
        report = classification_report(confusion_matrix(labels, labels))
        assert report.accuracy == 1.0
        assert report.macro.f1 == 1.0 and report.weighted.f1 == 1.0
        assert report.undefined == []

    def test_two_class_example(self):
        report = classification_report(confusion_matrix([0, 0, 1], [0, 1, 1], registry=("a", "b")))
        a, b = report.per_class
        assert (a.precision, a.recall, a.support) == (1.0, 0.5, 2)
        assert (b.precision, b.recall, b.support) == (0.5, 1.0, 1)
        assert a.f1 == pytest.approx(2 / 3) and b.f1 == pytest.approx(2 / 3)
        assert report.accuracy == pytest.approx(2 / 3)
        assert report.macro.precision == pytest.approx(0.75)
        assert report.weighted.precision == pytest.approx((1.0 * 2 + 0.5 * 1) / 3)

    def test_matches_brute_force(self):
        rng = Rng(11)
        y_true = [int(v) for v in rng.integers(0, NUM_CLASSES, 1000)]
        y_pred = [t if rng.uniform(0, 1, 1)[0] < 0.6 else int(rng.integers(0, NUM_CLASSES)) for t in y_true]
        report = classification_report(confusion_matrix(y_true, y_pred))
        precision, recall, f1, support = _brute_force(y_true, y_pred, NUM_CLASSES)
        for i, scores in enumerate(report.per_class):
            assert scores.precision == precision[i]
            assert scores.recall == recall[i]
            assert scores.f1 == f1[i]
            assert scores.support == support[i]
        assert report.macro.f1 == sum(f1) / NUM_CLASSES
        assert report.weighted.recall == pytest.approx(report.accuracy)
        assert report.accuracy == sum(1 for t, p in zip(y_true, y_pred) if t == p) / 1000

    def test_never_predicted_class(self):
        report = classification_report(confusion_matrix([0, 1, 2], [0, 0, 2]))
        backdoor = report.per_class[1]
        assert backdoor.precision == 0.0 and backdoor.recall == 0.0 and backdoor.f1 == 0.0
        assert "precision:Backdoor" in report.undefined
        assert f"recall:{CLASS_NAMES[5]}" in report.undefined

    def test_permutation_invariant(self):
        rng = Rng(12)
        y_true = rng.integers(0, NUM_CLASSES, 200)
        y_pred = rng.integers(0, NUM_CLASSES, 200)
        order = rng.permutation(200)
        a = classification_report(confusion_matrix(y_true, y_pred))
        b = classification_report(confusion_matrix(y_true[order], y_pred[order]))
        assert a.accuracy == b.accuracy
        assert a.weighted.f1 == pytest.approx(b.weighted.f1)
        assert a.macro.precision == pytest.approx(b.macro.precision)


class TestOutput:
    """报告输出"""

    def test_format_and_dict(self):
        report = classification_report(confusion_matrix([0, 3, 3, 14], [0, 3, 1, 14]))
        text = format_report(report)
        assert "precision" in text and "macro avg" in text and "weighted avg" in text
        assert "DDoS_ICMP" in text and "Fingerprinting" in text
        document = report_to_dict(report)
        assert document['total'] == 4
        assert len(document['per_class']) == NUM_CLASSES
        assert document['accuracy'] == 0.75

    def test_confusion_csv(self, tmp_path):
        path = tmp_path / "confusion.csv"
        confusion_to_csv(confusion_matrix([0, 1], [1, 1]), str(path))
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("true\\pred,Normal,Backdoor")
        assert lines[1].startswith("Normal,0,1")
        assert len(lines) == NUM_CLASSES + 1


if __name__ == "__main__":
    pytest.main([__file__])
