import numpy as np
import pytest
import scipy.stats

from radioselect.errors import DegenerateDataError, InputError
from radioselect.metrics import (
    EvalReport,
    PredictionSet,
    confusion_metrics,
    paired_t_test,
    roc_auc,
    youden_threshold,
)


def _preds(decisions, labels, scores=None, task="abnormal"):
    n = len(decisions)
    if scores is None:
        scores = np.linspace(0.1, 0.9, n)
    return PredictionSet(task, [f"s{i}" for i in range(n)], scores, decisions, labels)


# -- prediction set validation ------------------------------------------------


def test_prediction_set_rejects_bad_inputs():
    with pytest.raises(InputError, match="unique"):
        PredictionSet("acl", ["a", "a"], [0.1, 0.2], [0, 1], [0, 1])
    with pytest.raises(InputError, match="0 or 1"):
        PredictionSet("acl", ["a", "b"], [0.1, 0.2], [0, 2], [0, 1])
    with pytest.raises(InputError, match="equal length"):
        PredictionSet("acl", ["a", "b"], [0.1], [0, 1], [0, 1])


# -- confusion metrics --------------------------------------------------------


def test_confusion_metrics_worked_example():
    # TP=9 FN=1 TN=7 FP=3 -> Sen 0.9, Spe 0.7, Acc 0.8
    decisions = [1] * 9 + [0] * 1 + [0] * 7 + [1] * 3
    labels = [1] * 10 + [0] * 10
    report = confusion_metrics(_preds(decisions, labels))
    assert report.counts == {"tp": 9, "fp": 3, "tn": 7, "fn": 1}
    assert report.sensitivity == pytest.approx(0.9)
    assert report.specificity == pytest.approx(0.7)
    assert report.accuracy == pytest.approx(0.8)
    assert report.n == 20


def test_confusion_metrics_all_correct():
    report = confusion_metrics(_preds([1, 1, 0, 0], [1, 1, 0, 0], [0.9, 0.8, 0.1, 0.2]))
    assert report.accuracy == 1.0
    assert report.sensitivity == 1.0
    assert report.specificity == 1.0
    assert report.auc == 1.0


def test_confusion_metrics_undefined_ratios_absent():
    report = confusion_metrics(_preds([0, 0], [0, 0]))
    assert report.sensitivity is None  # no positive labels
    assert report.auc is None  # one class
    assert report.specificity == 1.0

    with pytest.raises(InputError, match="empty"):
        confusion_metrics(_preds([], [], []))


def test_eval_report_validation():
    with pytest.raises(InputError, match="missing"):
        EvalReport("acl", 0.5, {"tp": 1}, 1.0, 1.0, 1.0, 1.0)
    with pytest.raises(InputError, match="outside"):
        EvalReport("acl", 0.5, {"tp": 1, "fp": 0, "tn": 1, "fn": 0}, 1.2, 1.0, 1.0, 1.0)


# -- AUC ----------------------------------------------------------------------


def test_auc_worked_examples():
    assert roc_auc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.4, 0.6], [1, 0]) == 0.0
    assert roc_auc([0.5, 0.5], [1, 0]) == 0.5


def test_auc_requires_both_classes():
    with pytest.raises(DegenerateDataError):
        roc_auc([0.1, 0.9], [1, 1])


def _brute_force_auc(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


@pytest.mark.parametrize("seed", range(8))
def test_auc_matches_brute_force_pair_counting(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 200))
    labels = rng.integers(0, 2, n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    # quantized scores force ties
    scores = np.round(rng.uniform(0, 1, n), 2)
    assert roc_auc(scores, labels) == _brute_force_auc(scores, labels)


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(3)
    scores = rng.uniform(0, 1, 60)
    labels = rng.integers(0, 2, 60)
    labels[0], labels[1] = 0, 1
    base = roc_auc(scores, labels)
    assert roc_auc(np.exp(scores), labels) == base
    assert roc_auc(2000.0 * scores - 17.0, labels) == base


# -- Youden calibration -------------------------------------------------------


def test_youden_separable_example():
    t, j = youden_threshold([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert t == pytest.approx(0.5)
    assert j == 1.0


def test_youden_inverted_scores_boundary():
    t, j = youden_threshold([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0])
    assert j == 0.0
    assert t in (0.0, 1.0)
    assert t == 0.0  # tie resolves to the smallest threshold


def test_youden_is_argmax_over_all_candidates():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n = int(rng.integers(4, 40))
        scores = np.round(rng.uniform(0, 1, n), 2)
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        t, j = youden_threshold(scores, labels)
        assert -1.0 <= j <= 1.0
        uniq = np.unique(scores)
        candidates = np.concatenate(([0.0], (uniq[:-1] + uniq[1:]) / 2, [1.0]))
        n_pos, n_neg = labels.sum(), (1 - labels).sum()
        for c in candidates:
            d = scores >= c
            j_c = np.sum(d & (labels == 1)) / n_pos + np.sum(~d & (labels == 0)) / n_neg - 1
            assert j >= j_c - 1e-12

    with pytest.raises(DegenerateDataError):
        youden_threshold([0.3, 0.4], [1, 1])


# -- paired t-test ------------------------------------------------------------


def test_paired_t_worked_example():
    t, p, df = paired_t_test([2.0, 3.0, 4.0], [1.0, 1.0, 1.0])  # d = [1, 2, 3]
    assert t == pytest.approx(3.4641, abs=1e-4)
    assert df == 2
    assert p == pytest.approx(0.0742, abs=1e-4)


def test_paired_t_degenerate_and_mismatch():
    with pytest.raises(DegenerateDataError):
        paired_t_test([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])  # constant differences
    with pytest.raises(InputError):
        paired_t_test([1.0, 2.0], [1.0])
    with pytest.raises(InputError):
        paired_t_test([1.0], [2.0])


def test_paired_t_sign_symmetry():
    a = [0.91, 0.88, 0.95, 0.90]
    b = [0.85, 0.86, 0.91, 0.84]
    t1, p1, _ = paired_t_test(a, b)
    t2, p2, _ = paired_t_test(b, a)
    assert t2 == pytest.approx(-t1)
    assert p2 == pytest.approx(p1)


@pytest.mark.parametrize("seed", range(6))
def test_paired_t_matches_independent_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(3, 12))
    a = rng.normal(0.9, 0.05, n)
    b = a - rng.normal(0.02, 0.03, n)
    t, p, df = paired_t_test(a, b)
    oracle = scipy.stats.ttest_rel(a, b)
    assert t == pytest.approx(oracle.statistic, abs=1e-9)
    assert p == pytest.approx(oracle.pvalue, abs=1e-9)
    assert df == n - 1
