import numpy as np
import pytest

from canids.errors import DegenerateLabels, LengthMismatch
from canids.metrics import (
    ConfusionCounts,
    ScoredLabels,
    accuracy,
    confusion,
    f1,
    f1_from_pr,
    format_metric,
    precision,
    recall,
    roc_auc,
    tnr,
    tpr,
)


def brute_force_auc(scores, truth) -> float:
    """Independent oracle: count wins and half-credit ties over all
    (positive, negative) pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    pos = scores[truth == 1]
    neg = scores[truth == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def test_confusion_simple():
    assert confusion([1, 0], [1, 0]) == ConfusionCounts(tp=1, tn=1, fp=0, fn=0)


def test_confusion_all_cells():
    c = confusion([1, 1, 0, 0], [0, 1, 1, 0])
    assert c == ConfusionCounts(tp=1, tn=1, fp=1, fn=1)


def test_confusion_cells_sum_to_total():
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 2, size=1000)
    truth = rng.integers(0, 2, size=1000)
    c = confusion(pred, truth)
    assert c.total == 1000
    # recount oracle
    assert c.tp == sum(1 for p, t in zip(pred, truth) if p == 1 and t == 1)


def test_confusion_length_mismatch():
    with pytest.raises(LengthMismatch):
        confusion([1, 0], [1])


def test_f1_recomputes_reported_pairs():
    # published precision/recall pairs must reproduce their printed F1
    assert f1_from_pr(0.6591, 0.8805) == pytest.approx(0.7539, abs=1e-4)
    assert f1_from_pr(0.9853, 0.9193) == pytest.approx(0.9512, abs=1e-4)


def test_all_correct_gives_ones():
    c = ConfusionCounts(tp=10, tn=20, fp=0, fn=0)
    for metric in (accuracy, precision, recall, f1, tpr, tnr):
        assert metric(c) == 1.0


def test_undefined_metrics_return_none():
    assert precision(ConfusionCounts(tp=0, tn=5, fp=0, fn=5)) is None
    assert recall(ConfusionCounts(tp=0, tn=5, fp=5, fn=0)) is None
    assert tnr(ConfusionCounts(tp=5, tn=0, fp=0, fn=5)) is None
    assert accuracy(ConfusionCounts()) is None
    # precision=0 and recall=0: harmonic mean undefined
    assert f1(ConfusionCounts(tp=0, tn=1, fp=1, fn=1)) is None


def test_metric_identities_on_random_counts():
    rng = np.random.default_rng(1)
    for _ in range(300):
        tp, tn, fp, fn = (int(v) for v in rng.integers(0, 40, size=4))
        c = ConfusionCounts(tp, tn, fp, fn)
        if c.total:
            assert accuracy(c) == (tp + tn) / (tp + tn + fp + fn)
        p, r = precision(c), recall(c)
        if p is not None and r is not None and p + r > 0:
            assert f1(c) == pytest.approx(2 * p * r / (p + r), abs=1e-15)
        assert tpr(c) == recall(c)


def test_flip_predictions_swaps_tpr_tnr():
    rng = np.random.default_rng(2)
    for _ in range(200):
        pred = rng.integers(0, 2, size=50)
        truth = rng.integers(0, 2, size=50)
        c = confusion(pred, truth)
        c_flip = confusion(1 - pred, truth)
        t = tpr(c)
        if t is not None:
            assert tpr(c_flip) == pytest.approx(1 - t)
        n = tnr(c)
        if n is not None:
            assert tnr(c_flip) == pytest.approx(1 - n)


def test_auc_perfect_separation():
    s = ScoredLabels(np.array([0.9, 0.8, 0.1, 0.2]), np.array([1, 1, 0, 0]))
    assert roc_auc(s) == 1.0


def test_auc_all_ties():
    s = ScoredLabels(np.full(10, 0.5), np.array([1] * 5 + [0] * 5))
    assert roc_auc(s) == 0.5


def test_auc_mixed_example():
    # pairs: (0.9,0.6) win, (0.9,0.1) win, (0.4,0.6) loss, (0.4,0.1) win
    s = ScoredLabels(np.array([0.9, 0.4, 0.6, 0.1]), np.array([1, 1, 0, 0]))
    assert roc_auc(s) == 0.75
    assert roc_auc(s) == brute_force_auc(s.scores, s.truth)


def test_auc_matches_pair_counting_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 200))
        truth = rng.integers(0, 2, size=n)
        if truth.min() == truth.max():
            truth[0] = 1 - truth[0]
        # quantized scores force plenty of ties
        scores = np.round(rng.random(n), 1)
        s = ScoredLabels(scores, truth)
        assert abs(roc_auc(s) - brute_force_auc(scores, truth)) < 1e-12


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(4)
    scores = rng.random(150)
    truth = rng.integers(0, 2, size=150)
    truth[:2] = [0, 1]
    base = roc_auc(ScoredLabels(scores, truth))
    for transform in (lambda s: 3 * s + 2, np.exp, lambda s: s ** 3):
        assert roc_auc(ScoredLabels(transform(scores), truth)) == \
            pytest.approx(base, abs=1e-12)


def test_auc_degenerate_labels():
    with pytest.raises(DegenerateLabels):
        roc_auc(ScoredLabels(np.array([0.1, 0.2]), np.array([1, 1])))


def test_scored_labels_length_check():
    with pytest.raises(LengthMismatch):
        ScoredLabels(np.array([0.1]), np.array([1, 0]))


def test_format_metric():
    assert format_metric(0.75391) == "0.7539"
    assert format_metric(None) == "—"
