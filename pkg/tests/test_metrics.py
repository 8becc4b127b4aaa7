import numpy as np
import pytest

from fedgate.errors import UndefinedMetricError
from fedgate.metrics import accuracy, evaluate_scores, roc_auc, roc_curve


def pair_count_auc(scores, labels):
    """Brute force: P(score_pos > score_neg) + 0.5 * P(tie) over all pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def random_case(rng):
    n = int(rng.integers(2, 201))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    if rng.random() < 0.5:
        scores = rng.integers(0, 6, n) / 5.0  # many ties
    else:
        scores = rng.random(n)
    return scores, labels


def test_accuracy_examples():
    assert accuracy([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert accuracy([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == 0.5
    # ties at the threshold count as positive
    assert accuracy([0.5] * 5, [1, 1, 0, 0, 0]) == 0.4


def test_accuracy_empty():
    with pytest.raises(UndefinedMetricError):
        accuracy([], [])


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[1] == 1.0
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 1, 0])[1] == 0.5
    assert roc_auc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0])[1] == 0.75
    assert pair_count_auc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == 0.75


def test_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_counting_randomized():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(500):
        scores, labels = random_case(rng)
        worst = max(worst, abs(roc_auc(scores, labels)[1] - pair_count_auc(scores, labels)))
    assert worst <= 1e-12


def test_roc_points_shape():
    rng = np.random.default_rng(5)
    for _ in range(50):
        scores, labels = random_case(rng)
        fpr, tpr = roc_curve(scores, labels)
        assert (fpr[0], tpr[0]) == (0, 0) and (fpr[-1], tpr[-1]) == (1, 1)
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


def test_auc_invariant_to_increasing_transform():
    rng = np.random.default_rng(6)
    for _ in range(50):
        scores, labels = random_case(rng)
        a = roc_auc(scores, labels)[1]
        b = roc_auc(np.exp(3 * scores) + 7, labels)[1]
        assert a == pytest.approx(b, abs=1e-12)


def test_label_reversal():
    rng = np.random.default_rng(7)
    for _ in range(50):
        scores, labels = random_case(rng)
        assert roc_auc(scores, 1 - labels)[1] == pytest.approx(1 - roc_auc(scores, labels)[1], abs=1e-12)


def test_report_serialization():
    r = evaluate_scores([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0])
    assert r.n == 4 and r.accuracy == 0.5 and r.auc == 0.75
    lines = dict(line.split("=") for line in r.to_text().splitlines())
    assert set(lines) == {"n", "accuracy", "auc", "loss"}
    assert float(lines["auc"]) == 0.75
    csv = r.roc_csv().splitlines()
    assert csv[0] == "fpr,tpr" and csv[1] == "0.0,0.0" and csv[-1] == "1.0,1.0"


def test_report_single_class_auc_is_nan():
    r = evaluate_scores([0.7, 0.8], [1, 1])
    assert np.isnan(r.auc) and r.accuracy == 1.0
