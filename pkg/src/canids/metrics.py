"""Binary detection metrics with anomaly as the positive class.

Ratio metrics return None (never a silent 0) when their denominator is
zero; reports render that as an em-dash. ROC AUC is the mid-rank
Mann-Whitney statistic: P(score+ > score-) + 0.5 * P(score+ = score-).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLabels, LengthMismatch


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class ScoredLabels:
    """Parallel (anomaly score, truth) sequences feeding ROC AUC."""

    scores: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        if len(self.scores) != len(self.truth):
            raise LengthMismatch(
                f"{len(self.scores)} scores vs {len(self.truth)} labels"
            )


def confusion(predicted, truth) -> ConfusionCounts:
    """Tally each index into exactly one of tp/tn/fp/fn (anomaly = 1)."""
    pred = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape:
        raise LengthMismatch(f"{pred.shape} predictions vs {true.shape} labels")
    tp = int(np.sum((pred == 1) & (true == 1)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def accuracy(c: ConfusionCounts) -> float | None:
    return _ratio(c.tp + c.tn, c.total)


def precision(c: ConfusionCounts) -> float | None:
    return _ratio(c.tp, c.tp + c.fp)


def recall(c: ConfusionCounts) -> float | None:
    return _ratio(c.tp, c.tp + c.fn)


def tpr(c: ConfusionCounts) -> float | None:
    return recall(c)


def tnr(c: ConfusionCounts) -> float | None:
    return _ratio(c.tn, c.tn + c.fp)


def f1(c: ConfusionCounts) -> float | None:
    p = precision(c)
    r = recall(c)
    if p is None or r is None or p + r == 0:
        return None
    return 2 * p * r / (p + r)


def f1_from_pr(p: float, r: float) -> float | None:
    """Harmonic mean of an externally supplied (precision, recall) pair."""
    if p + r == 0:
        return None
    return 2 * p * r / (p + r)


def roc_auc(scored: ScoredLabels) -> float:
    """Rank-based AUC with mid-rank tie handling.

    Sort scores ascending, assign tied scores the mean of their ranks, and
    evaluate (R+ - n+(n+ + 1)/2) / (n+ n-) where R+ sums positive ranks.
    """
    scores = np.asarray(scored.scores, dtype=np.float64)
    truth = np.asarray(scored.truth, dtype=np.int64)
    n_pos = int(np.sum(truth == 1))
    n_neg = int(np.sum(truth == 0))
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # 1-based ranks i+1 .. j+1 share the mid-rank
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    rank_sum_pos = float(np.sum(ranks[truth == 1]))
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def format_metric(value: float | None, places: int = 4) -> str:
    """Report rendering: fixed decimals, em-dash for undefined."""
    if value is None:
        return "—"
    return f"{value:.{places}f}"
