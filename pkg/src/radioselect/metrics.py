"""Classification metrics: confusion-matrix ratios, exact rank-based AUC,
Youden threshold calibration, and paired significance testing.

Undefined ratios (zero denominator) are reported as ``None``, never as 0;
silent zeros would corrupt ablation tables.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .errors import DegenerateDataError, InputError

__all__ = [
    "PredictionSet",
    "EvalReport",
    "confusion_metrics",
    "roc_auc",
    "youden_threshold",
    "paired_t_test",
]


def _check_binary(values, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise InputError(f"{what} must be 0 or 1")
    return arr.astype(np.int64)


@dataclass
class PredictionSet:
    """Per-study predictions for one task: ids, scores, hard decisions,
    ground-truth labels."""

    task: str
    ids: list
    scores: np.ndarray
    decisions: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.ids = list(self.ids)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.decisions = _check_binary(self.decisions, "decisions")
        self.labels = _check_binary(self.labels, "labels")
        n = len(self.ids)
        if not (len(self.scores) == len(self.decisions) == len(self.labels) == n):
            raise InputError("ids, scores, decisions and labels must have equal length")
        if len(set(self.ids)) != n:
            raise InputError("study ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class EvalReport:
    """One evaluated configuration: confusion counts plus derived metrics.

    Metric fields are ``None`` when undefined (e.g. sensitivity with no
    positive labels, AUC with one class). ``spread`` optionally holds a
    per-metric standard deviation across seeds; ``seeds`` lists the runs
    that were averaged.
    """

    task: str
    threshold: float
    counts: dict
    accuracy: float
    sensitivity: float
    specificity: float
    auc: float
    label: str = ""
    fingerprint: str = ""
    seeds: list = None
    spread: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in ("tp", "fp", "tn", "fn"):
            if key not in self.counts:
                raise InputError(f"counts is missing {key!r}")
        for name in ("accuracy", "sensitivity", "specificity", "auc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise InputError(f"{name}={v} outside [0, 1]")

    @property
    def n(self) -> int:
        return sum(self.counts[k] for k in ("tp", "fp", "tn", "fn"))


def confusion_metrics(preds: PredictionSet) -> EvalReport:
    """Accuracy, sensitivity and specificity from hard decisions.

    AUC is filled from the scores when both classes are present, else left
    absent. Empty prediction set is an error.
    """
    if len(preds) == 0:
        raise InputError("cannot evaluate an empty prediction set")
    d, y = preds.decisions, preds.labels
    tp = int(np.sum((d == 1) & (y == 1)))
    fp = int(np.sum((d == 1) & (y == 0)))
    tn = int(np.sum((d == 0) & (y == 0)))
    fn = int(np.sum((d == 0) & (y == 1)))

    def ratio(num, den):
        return num / den if den else None

    auc = None
    if 0 < int(np.sum(y)) < len(y):
        auc = roc_auc(preds.scores, y)
    return EvalReport(
        task=preds.task,
        threshold=None,
        counts={"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        accuracy=ratio(tp + tn, len(preds)),
        sensitivity=ratio(tp, tp + fn),
        specificity=ratio(tn, tn + fp),
        auc=auc,
    )


def roc_auc(scores, labels) -> float:
    """Exact AUC: P(score_pos > score_neg) + 0.5 P(tie).

    Computed from midranks rather than a trapezoidal ROC sweep, so ties are
    handled exactly. Requires both classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = _check_binary(labels, "labels")
    if scores.shape != y.shape or scores.ndim != 1:
        raise InputError("scores and labels must be equal-length vectors")
    n_pos = int(np.sum(y))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError("AUC needs both classes in the label set")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(y), dtype=np.float64)
    i = 0
    while i < len(y):
        j = i
        while j + 1 < len(y) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum_pos = float(np.sum(ranks[y == 1]))
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def youden_threshold(scores, labels) -> tuple:
    """Threshold maximizing J = sensitivity + specificity - 1.

    Candidates are the midpoints between consecutive sorted unique scores,
    plus the boundaries 0 and 1; decisions use score >= threshold. Ties in J
    resolve to the smallest threshold. Returns (threshold, J).
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = _check_binary(labels, "labels")
    if scores.shape != y.shape or scores.ndim != 1:
        raise InputError("scores and labels must be equal-length vectors")
    n_pos = int(np.sum(y))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError("Youden calibration needs both classes")
    uniq = np.unique(scores)
    candidates = np.concatenate(([0.0], (uniq[:-1] + uniq[1:]) / 2.0, [1.0]))
    best_t, best_counts, best_key = None, None, -1
    for t in candidates:
        d = scores >= t
        tp = int(np.sum(d & (y == 1)))
        tn = int(np.sum(~d & (y == 0)))
        # maximize J over the common denominator: exact integer comparison,
        # so mathematical ties cannot flip on float rounding
        key = tp * n_neg + tn * n_pos
        if key > best_key:  # strict: ties keep the smallest threshold
            best_t, best_counts, best_key = float(t), (tp, tn), key
    tp, tn = best_counts
    return best_t, tp / n_pos + tn / n_neg - 1.0


def paired_t_test(a, b) -> tuple:
    """Two-sided paired t-test on per-run metrics.

    Returns (t, p, df) with t = mean(d) / (sd(d)/sqrt(n)) for d = a - b,
    sample (n-1) standard deviation, and p from the Student-t CDF through
    the regularized incomplete beta function.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("paired samples must be equal-length vectors")
    if len(a) < 2:
        raise InputError("paired test needs at least two pairs")
    d = a - b
    n = len(d)
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateDataError("differences have zero variance")
    t = float(np.mean(d)) / (sd / np.sqrt(n))
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return t, p, df
