"""Metric suite: worked confusion matrices, QWK oracle agreement, top-k."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import cohen_kappa_score

from cpcd import oracle
from cpcd.metrics import (compute_metrics, confusion_from_predictions,
                          quadratic_weighted_kappa, topk_accuracy)


def expand_to_labels(cm):
    """Confusion matrix to (true, predicted) label lists."""
    trues, preds = [], []
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            trues.extend([i] * int(cm[i, j]))
            preds.extend([j] * int(cm[i, j]))
    return trues, preds


def test_identity_matrix_perfect_scores():
    report = compute_metrics(np.eye(4, dtype=int) * 5)
    assert report.top1 == 1.0
    assert report.f1_macro == 1.0
    assert report.qwk == 1.0
    assert report.recall_macro == 1.0
    assert report.specificity_macro == 1.0


def test_two_class_worked_example():
    cm = np.array([[8, 2], [3, 7]])
    report = compute_metrics(cm)
    assert report.per_class[0]["recall"] == pytest.approx(0.8, abs=1e-12)
    assert report.per_class[0]["f1"] == pytest.approx(2 * 8 / (2 * 8 + 2 + 3), abs=1e-12)
    assert report.per_class[0]["specificity"] == pytest.approx(7 / 10, abs=1e-12)
    assert report.top1 == pytest.approx(15 / 20, abs=1e-12)
    # swapped variants mirror the standard ones with roles exchanged
    assert report.swapped_specificity_macro == pytest.approx(report.recall_macro, abs=1e-15)


def test_constant_predictor_qwk_zero():
    cm = np.zeros((4, 4), dtype=int)
    cm[:, 2] = 10
    report = compute_metrics(cm)
    assert report.qwk == pytest.approx(0.0, abs=1e-12)
    assert oracle.quadratic_weighted_kappa(cm.tolist()) == pytest.approx(0.0, abs=1e-12)


def test_qwk_one_iff_diagonal():
    diag = np.diag([3, 0, 7, 1])
    assert quadratic_weighted_kappa(diag) == 1.0
    off = diag.copy()
    off[0, 1] = 1
    assert quadratic_weighted_kappa(off) < 1.0
    # all mass in one diagonal cell: chance term degenerates, still agreement
    single = np.zeros((3, 3), dtype=int)
    single[1, 1] = 9
    assert quadratic_weighted_kappa(single) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 6))
def test_qwk_matches_sklearn_and_loop_oracle(seed, n):
    rng = np.random.default_rng(seed)
    cm = rng.integers(0, 20, size=(n, n))
    cm[np.arange(n), np.arange(n)] += 1          # every class observed
    trues, preds = expand_to_labels(cm)
    ours = quadratic_weighted_kappa(cm)
    loop = oracle.quadratic_weighted_kappa(cm.tolist())
    skl = cohen_kappa_score(trues, preds, weights="quadratic", labels=list(range(n)))
    assert ours == pytest.approx(loop, abs=1e-12)
    assert ours == pytest.approx(skl, abs=1e-12)


def test_metric_permutation_equivariance():
    rng = np.random.default_rng(5)
    cm = rng.integers(0, 15, size=(4, 4))
    cm += np.eye(4, dtype=int)
    base = compute_metrics(cm)
    perm = np.array([2, 0, 3, 1])
    permuted = compute_metrics(cm[np.ix_(perm, perm)])
    assert permuted.top1 == pytest.approx(base.top1, abs=1e-12)
    assert permuted.f1_macro == pytest.approx(base.f1_macro, abs=1e-12)
    assert permuted.recall_macro == pytest.approx(base.recall_macro, abs=1e-12)
    assert permuted.specificity_macro == pytest.approx(base.specificity_macro, abs=1e-12)
    # QWK weights ordinal distance: only label *reversal* preserves it
    reversed_cm = cm[::-1, ::-1]
    assert compute_metrics(reversed_cm).qwk == pytest.approx(base.qwk, abs=1e-12)


def test_rejects_bad_matrices():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((3, 3), dtype=int))
    with pytest.raises(ValueError):
        compute_metrics(np.ones((2, 3), dtype=int))
    with pytest.raises(ValueError):
        compute_metrics(np.array([[1, -1], [0, 2]]))


def test_confusion_from_predictions():
    cm = confusion_from_predictions([0, 0, 1, 2], [0, 1, 1, 0], 3)
    np.testing.assert_array_equal(cm, [[1, 1, 0], [0, 1, 0], [1, 0, 0]])


def test_topk_trivial_cases():
    rng = np.random.default_rng(6)
    scores = rng.standard_normal((10, 4))
    labels = rng.integers(0, 4, 10)
    assert topk_accuracy(scores, labels, 4) == 1.0
    perfect = np.eye(4)[labels]
    assert topk_accuracy(perfect, labels, 1) == 1.0


def test_topk_crafted_three_rows():
    scores = np.array([
        [0.9, 0.05, 0.05],     # correct at top-1
        [0.3, 0.5, 0.2],       # label 0: second place only
        [0.1, 0.2, 0.7],       # label 0: third place
    ])
    labels = np.array([0, 0, 0])
    assert topk_accuracy(scores, labels, 1) == pytest.approx(1 / 3)
    assert topk_accuracy(scores, labels, 2) == pytest.approx(2 / 3)


def test_topk_tie_breaks_toward_lower_index():
    scores = np.array([[0.5, 0.5, 0.0]])
    assert topk_accuracy(scores, np.array([1]), 1) == 0.0   # index 0 wins the tie
    assert topk_accuracy(scores, np.array([0]), 1) == 1.0
    assert topk_accuracy(scores, np.array([1]), 2) == 1.0


def test_topk_rejects_k_too_large():
    with pytest.raises(ValueError):
        topk_accuracy(np.zeros((2, 3)), [0, 1], 4)
