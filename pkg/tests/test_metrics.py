import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conmatch_kit.datakit import Dataset
from conmatch_kit.metrics import (
    ConfidenceSample,
    DegenerateLabels,
    LengthMismatch,
    auc_roc,
    confident_set,
    error_rate,
    mean_std,
    per_class_accuracy,
    pseudo_quality,
)
from conmatch_kit.model import build_classifier


def brute_auc(conf, correct):
    pos = [c for c, k in zip(conf, correct) if k]
    neg = [c for c, k in zip(conf, correct) if not k]
    total = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return total / (len(pos) * len(neg))


def test_auc_examples():
    samples = [ConfidenceSample(0.9, True), ConfidenceSample(0.8, False), ConfidenceSample(0.7, True), ConfidenceSample(0.6, False)]
    assert auc_roc(samples) == pytest.approx(0.75)
    assert auc_roc([0.9, 0.8, 0.1], [True, True, False]) == 1.0
    assert auc_roc([0.3] * 5, [True, False, True, False, True]) == 0.5


def test_auc_degenerate_and_mismatch():
    with pytest.raises(DegenerateLabels):
        auc_roc([0.1, 0.2], [True, True])
    with pytest.raises(LengthMismatch):
        auc_roc([0.1, 0.2], [True])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=300))
def test_auc_matches_brute_force_with_ties(rows):
    conf = [c / 20 for c, _ in rows]
    correct = [k for _, k in rows]
    if all(correct) or not any(correct):
        return
    assert abs(auc_roc(conf, correct) - brute_auc(conf, correct)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(-50, 50), st.booleans()), min_size=2, max_size=100))
def test_auc_invariant_to_monotone_transform(rows):
    # integer inputs keep the cubic map exact, hence strictly increasing
    conf = np.array([c for c, _ in rows], dtype=np.float64)
    correct = [k for _, k in rows]
    if all(correct) or not any(correct):
        return
    assert auc_roc(conf, correct) == pytest.approx(auc_roc(conf**3 + 5 * conf - 2, correct), abs=1e-12)


def test_pseudo_quality_examples():
    r = pseudo_quality([0, 1, 2], [0, 1, 2], [True, True, True])
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)
    # TP=3, FP=1, FN=1
    pred = [0, 1, 2, 0, 1, 2]
    true = [0, 1, 2, 1, 1, 0]
    mask = [True, True, True, True, False, False]
    r = pseudo_quality(pred, true, mask)
    assert (r.precision, r.recall, r.f1) == (0.75, 0.75, 0.75)
    r = pseudo_quality([0, 1], [0, 1], [False, False])
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)
    with pytest.raises(LengthMismatch):
        pseudo_quality([0], [0, 1], [True])


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.booleans()), max_size=60))
def test_pseudo_quality_matches_confusion_matrix(rows):
    pred = [r[0] for r in rows]
    true = [r[1] for r in rows]
    mask = [r[2] for r in rows]
    tp = fp = fn = 0
    for p, y, m in rows:
        if m and p == y:
            tp += 1
        elif m:
            fp += 1
        elif p == y:
            fn += 1
    r = pseudo_quality(pred, true, mask)
    assert r.precision == (tp / (tp + fp) if tp + fp else 0.0)
    assert r.recall == (tp / (tp + fn) if tp + fn else 0.0)
    assert r.n_confident == sum(mask)


def test_confident_set_modes():
    assert confident_set([0.5, 0.51], "estimator").tolist() == [False, True]
    assert confident_set([0.94, 0.95], "max_prob", 0.95).tolist() == [False, True]


def test_error_rate_examples():
    model = build_classifier(2, 4, widths=(), seed=0)
    with torch.no_grad():
        model.classifier.weight.zero_()
        model.classifier.bias.copy_(torch.tensor([5.0, 0, 0, 0]))
    ds = Dataset(np.zeros((8, 2)), [0, 1, 2, 3] * 2, 4)
    assert error_rate(model, ds) == 0.75
    with torch.no_grad():
        model.classifier.weight.copy_(torch.tensor([[10.0, 0], [-10.0, 0]]).repeat(2, 1)[:4])
    perfect = Dataset(np.array([[1.0, 0.0], [-1.0, 0.0]]), [0, 1], 4)
    assert error_rate(model, perfect) == 0.0


def test_per_class_and_mean_std():
    assert per_class_accuracy([0, 0, 1, 1], [0, 1, 1, 1], 3)[:2] == [1.0, 2 / 3]
    m, s = mean_std([0.1, 0.2, 0.3])
    assert m == pytest.approx(0.2) and s == pytest.approx(0.1)
    assert mean_std([0.4]) == (0.4, 0.0)
