import math

import numpy as np
import pytest

from perfmae.errors import UndefinedMetricError
from perfmae.metrics import auc, classification_metrics, mean_metrics, pearson, r2_score, regression_metrics


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc([0.5] * 6, [0, 1] * 3) == 0.5
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_pairwise_with_ties(rng):
    for _ in range(50):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 5, n) / 4.0
        assert auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-15)


def test_classification_examples():
    m = classification_metrics([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0])
    assert m["confusion"] == {"tp": 1, "fp": 1, "fn": 1, "tn": 1}
    assert (m["accuracy"], m["precision"], m["recall"], m["f1"]) == (0.5, 0.5, 0.5, 0.5)
    perfect = classification_metrics([0.9, 0.8, 0.1], [1, 1, 0])
    assert all(perfect[k] == 1.0 for k in ("accuracy", "precision", "recall", "f1", "auc"))
    neg = classification_metrics([0.1, 0.2, 0.3], [1, 0, 1])
    assert neg["recall"] == 0.0 and neg["precision"] == 0.0
    assert "precision_zero_denominator" in neg["flags"]
    single = classification_metrics([0.1, 0.7], [1, 1])
    assert math.isnan(single["auc"]) and "auc_single_class" in single["flags"]


def test_regression_examples():
    m = regression_metrics([0.2, 0.4, 0.9], [0.1, 0.5, 0.8])
    assert m["mse"] == pytest.approx(0.01, abs=1e-15)
    assert m["rmse"] == pytest.approx(0.1, abs=1e-15)
    assert m["mae"] == pytest.approx(0.1, abs=1e-15)
    t = [0.1, 0.5, 0.8]
    same = regression_metrics(t, t)
    assert (same["mse"], same["mae"], same["r2"], same["pearson"]) == (0.0, 0.0, 1.0, pytest.approx(1.0))
    assert r2_score([np.mean(t)] * 3, t) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(UndefinedMetricError):
        pearson([np.mean(t)] * 3, t)
    with pytest.raises(UndefinedMetricError):
        regression_metrics([0.1, 0.2], [0.5, 0.5])


def test_mean_metrics():
    recs = [{"a": 1.0, "b": 2.0}, {"a": 3.0, "b": 4.0}]
    assert mean_metrics(recs, ("a", "b")) == {"a": 2.0, "b": 3.0}


def test_auc_monotone_invariance_and_complement(rng):
    for _ in range(20):
        labels = np.array([0, 1] + list(rng.integers(0, 2, 30)))
        scores = rng.random(32)
        a = auc(scores, labels)
        assert auc(np.exp(scores), labels) == a
        assert auc(3.0 * scores - 1.0, labels) == a
        assert a + auc(-scores, labels) == pytest.approx(1.0, abs=1e-15)
