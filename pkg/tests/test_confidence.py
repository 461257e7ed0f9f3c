import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conmatch_kit.confidence import (
    ConfidenceEstimator,
    build_estimator,
    conf_forward,
    np_confidence,
    similarity,
    topk_mask,
    trunk_widths,
)
from conmatch_kit.model import ShapeMismatch

probs = arrays(np.float64, 4, elements=st.floats(0.01, 1.0)).map(lambda a: a / a.sum())


def test_similarity_examples():
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert math.isclose(similarity(a, torch.tensor([0.5, 0.5])).item(), 1 / math.log(2), rel_tol=1e-12)
    one = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    s = similarity(one, one, eps=1e-8).item()
    assert math.isfinite(s) and s == pytest.approx(1e8)
    f1, f2 = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 2.0])
    assert similarity(f1, f2, "cosine", eps=1e-8).item() == pytest.approx(0.5 + 1e-8, abs=1e-15)
    d = torch.tensor([0.6, 0.4], dtype=torch.float64)
    assert similarity(a, d, "l2").item() == pytest.approx(1 / math.hypot(0.4, 0.4))
    with pytest.raises(ValueError):
        similarity(a, d, "kl")


def test_np_confidence_examples():
    anchor = torch.tensor([1.0, 0.0], dtype=torch.float64)
    # H_i = 0.5, H_j = 1.0
    si = torch.tensor([math.exp(-0.5), 1 - math.exp(-0.5)], dtype=torch.float64)
    sj = torch.tensor([math.exp(-1.0), 1 - math.exp(-1.0)], dtype=torch.float64)
    pair = np_confidence(anchor, si, sj)
    assert pair.c_i.item() == pytest.approx(2 / 3, abs=1e-12)
    assert pair.c_j.item() == pytest.approx(1 / 3, abs=1e-12)
    sym = np_confidence(anchor, si, si)
    assert sym.c_i.item() == sym.c_j.item() == 0.5


def test_np_confidence_ratio_invariance():
    # l2 similarity scales by 1/lambda when both distances scale by lambda
    anchor = torch.tensor([0.5, 0.5], dtype=torch.float64)
    a = np_confidence(anchor, anchor + torch.tensor([0.1, -0.1]), anchor + torch.tensor([0.2, -0.2]), "l2")
    b = np_confidence(anchor, anchor + torch.tensor([0.2, -0.2]), anchor + torch.tensor([0.4, -0.4]), "l2")
    assert a.c_i.item() == pytest.approx(b.c_i.item(), abs=1e-12)


@settings(max_examples=200)
@given(probs, probs, probs, st.sampled_from(["cross_entropy", "l2"]))
def test_np_pair_sums_to_one(a, b, c, kind):
    pair = np_confidence(a, b, c, kind)
    assert abs(pair.c_i.item() + pair.c_j.item() - 1) < 1e-12
    assert 0 < pair.c_i.item() < 1


def test_np_confidence_detached():
    p = torch.tensor([0.3, 0.7], dtype=torch.float64, requires_grad=True)
    pair = np_confidence(p, p * 0.9 + 0.05, p)
    assert not pair.c_i.requires_grad


def test_topk_examples():
    L = torch.tensor([3.0, 1.0, 2.0])
    assert topk_mask(L, 2).tolist() == [3.0, -30.0, 2.0]
    assert torch.equal(topk_mask(L, 3), L)
    assert topk_mask(torch.tensor([1.0, 2.0, 2.0, 2.0]), 2).tolist() == [-30.0, 2.0, 2.0, -30.0]
    with pytest.raises(ValueError):
        topk_mask(L, 0)


def test_topk_ten_classes_k5():
    out = topk_mask(torch.randn(3, 10), 5)
    assert ((out == -30.0).sum(-1) == 5).all()


def _topk_oracle(row, k, sentinel=-30.0):
    order = sorted(range(len(row)), key=lambda i: (-row[i], i))[:k]
    return [row[i] if i in order else sentinel for i in range(len(row))]


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=9), st.data())
def test_topk_matches_stable_sort_oracle(row, data):
    k = data.draw(st.integers(1, len(row)))
    row = [float(v) for v in row]
    out = topk_mask(torch.tensor(row, dtype=torch.float64), k).tolist()
    assert out == _topk_oracle(row, k)
    assert int(np.argmax(out)) == int(np.argmax(row))


def test_trunk_widths():
    assert trunk_widths("basic", 32, 3) == [32, 32, 32]
    assert trunk_widths("reduced", 32, 3) == [32, 16, 8]
    assert trunk_widths("topk_norm", 32, 3) == [32, 16, 8]


def test_zero_trunk_gives_half():
    est = ConfidenceEstimator(8, 4, variant="basic", delta=0.0)
    with torch.no_grad():
        est.head.weight.zero_()
        est.head.bias.zero_()
    c = est(torch.randn(5, 8), torch.randn(5, 4))
    assert torch.equal(c, torch.full((5,), 0.5))


@pytest.mark.parametrize("variant", ["basic", "reduced", "topk", "topk_norm"])
def test_variants_run_and_stay_in_open_interval(variant):
    est = build_estimator(8, 4, seed=0, variant=variant).eval()
    F = torch.randn(6, 8, dtype=torch.float64) * 100
    L = torch.randn(6, 4, dtype=torch.float64) * 100
    c = est(F, L)
    assert c.shape == (6,) and ((c > 0) & (c < 1)).all()


def test_basic_and_reduced_differ_in_shape_only():
    basic = build_estimator(8, 4, seed=0, variant="basic")
    reduced = build_estimator(8, 4, seed=0, variant="reduced")
    shapes_b = [m.out_features for m in basic.trunk if isinstance(m, torch.nn.Linear)]
    shapes_r = [m.out_features for m in reduced.trunk if isinstance(m, torch.nn.Linear)]
    assert shapes_b == [32, 32, 32] and shapes_r == [32, 16, 8]


def test_topk_norm_eval_deterministic_and_single_sample():
    est = build_estimator(8, 4, seed=0).eval()
    F, L = torch.randn(8, dtype=torch.float64), torch.randn(4, dtype=torch.float64)
    assert conf_forward(est, F, L).item() == conf_forward(est, F, L).item()


def test_logits_only_input():
    est = build_estimator(8, 4, seed=0, variant="topk", inputs="logits")
    assert est(torch.randn(3, 8, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64)).shape == (3,)


def test_shape_mismatch():
    est = build_estimator(8, 4, seed=0)
    with pytest.raises(ShapeMismatch):
        est(torch.randn(2, 7, dtype=torch.float64), torch.randn(2, 4, dtype=torch.float64))


def test_default_k_half_of_classes():
    assert ConfidenceEstimator(4, 10).k == 5
    assert ConfidenceEstimator(4, 1).k == 1


def test_bn_momentum_convention():
    est = ConfidenceEstimator(4, 2, variant="topk_norm", bn_momentum=0.9)
    bn = [m for m in est.trunk if isinstance(m, torch.nn.BatchNorm1d)][0]
    assert bn.momentum == pytest.approx(0.1)
