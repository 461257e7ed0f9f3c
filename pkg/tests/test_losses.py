import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conmatch_kit.losses import (
    DomainError,
    LossBreakdown,
    LossWeights,
    confidence_targets,
    loss_ccr,
    loss_conf,
    loss_conf_sup,
    loss_feat,
    loss_sup,
    loss_un,
    total_np,
    total_p,
    unguided_pair,
)

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


def test_sup_examples():
    assert loss_sup(t([[1.0, 0.0], [0.0, 1.0]]), [0, 1]).item() == pytest.approx(0.0, abs=1e-11)
    assert loss_sup(torch.full((3, 4), 0.25, dtype=D), [0, 1, 2]).item() == pytest.approx(math.log(4))
    p = t([[math.exp(-0.2), 1 - math.exp(-0.2)], [math.exp(-0.6), 1 - math.exp(-0.6)]])
    assert loss_sup(p, [0, 0]).item() == pytest.approx(0.4, abs=1e-12)
    with pytest.raises(ValueError):
        loss_sup(torch.zeros(0, 2, dtype=D), [])


def test_un_examples():
    p_weak = t([[0.1, 0.9, 0.0], [0.5, 0.3, 0.2]])
    p_strong = t([[0.25, 0.5, 0.25], [0.2, 0.2, 0.6]])
    assert loss_un(p_weak, p_strong, [0, 0]).item() == 0.0
    # one admitted sample contributes ln 2, averaged over the batch of 2
    assert loss_un(p_weak, p_strong, [1, 0]).item() == pytest.approx(math.log(2) / 2)
    assert loss_un(p_weak, t([[0.0, 1.0, 0.0], [1.0, 0, 0]]), [1, 1]).item() == pytest.approx(0.0, abs=1e-11)


def test_un_weak_branch_gets_no_gradient():
    w = t([[0.2, 0.8]]).requires_grad_(True)
    s = t([[0.4, 0.6]]).requires_grad_(True)
    loss_un(w, s, [1], "sharpen", 0.5).backward()
    assert w.grad is None or torch.count_nonzero(w.grad) == 0
    assert torch.count_nonzero(s.grad) > 0


def test_ccr_examples():
    p = t([[0.5, 0.5]])
    assert loss_ccr(p, p, t([0.0]), t([0.0])).item() == 0.0
    assert loss_ccr(p, p, t([0.5]), t([0.5])).item() == pytest.approx(math.log(2))


def test_ccr_stop_gradient_on_targets():
    pi = t([[0.3, 0.7]]).requires_grad_(True)
    pj = t([[0.6, 0.4]]).requires_grad_(True)
    loss_ccr(pi, pj, t([1.0]), t([0.0])).backward()
    # only the first term is active; its target q_i is a constant
    assert pi.grad is None or torch.count_nonzero(pi.grad) == 0
    assert torch.count_nonzero(pj.grad) > 0


def test_ccr_confidences_are_constants():
    c = t([0.7]).requires_grad_(True)
    p = t([[0.3, 0.7]])
    out = loss_ccr(p, p, c, c)
    assert not out.requires_grad


def test_conf_examples():
    anchor = t([[1.0, 0.0]])
    strong = t([[0.5, 0.5]])
    assert loss_conf(anchor, strong, t([1.0])).item() == pytest.approx(math.log(2))
    assert loss_conf(anchor, anchor, t([0.25])).item() == pytest.approx(math.log(4), abs=1e-10)
    with pytest.raises(DomainError):
        loss_conf(anchor, strong, t([0.0]))


def test_conf_two_views_average():
    anchor = t([[1.0, 0.0]])
    a = loss_conf(anchor, t([[0.5, 0.5]]), t([0.5]))
    b = loss_conf(anchor, t([[0.25, 0.75]]), t([0.9]))
    both = loss_conf(anchor, (t([[0.5, 0.5]]), t([[0.25, 0.75]])), (t([0.5]), t([0.9])))
    assert both.item() == pytest.approx((a.item() + b.item()) / 2)


def test_conf_grid_minimiser_H2():
    grid = np.arange(1, 10000) * 1e-4
    H = 2.0
    values = [loss_conf(t([[1.0, 0.0]]), t([[math.exp(-H), 1 - math.exp(-H)]]), t([c])).item() for c in grid[::50]]
    c_best = grid[::50][int(np.argmin(values))]
    assert abs(c_best - 0.5) <= 50e-4


def test_conf_detaches_model_outputs():
    w = t([[0.7, 0.3]]).requires_grad_(True)
    s = t([[0.4, 0.6]]).requires_grad_(True)
    c = t([0.6]).requires_grad_(True)
    loss_conf(w, s, c).backward()
    assert w.grad is None and s.grad is None
    assert c.grad is not None


def test_conf_sup_examples():
    assert loss_conf_sup(t([1.0, 0.0]), t([1.0, 0.0])).item() == pytest.approx(0.0, abs=1e-12)
    assert loss_conf_sup(t([0.5, 0.5]), t([1.0, 0.0])).item() == pytest.approx(math.log(2))
    assert loss_conf_sup(t([0.9]), t([1.0])).item() == pytest.approx(-math.log(0.9), abs=1e-12)
    assert -math.log(0.9) == pytest.approx(0.10536, abs=1e-5)


def test_confidence_targets():
    probs = t([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    assert confidence_targets(probs, [0, 0, 0]).tolist() == [1.0, 0.0, 1.0]


def test_feat_loss_bounds():
    f = torch.randn(5, 4, dtype=D)
    assert loss_feat(f, f).item() == pytest.approx(-1.0)
    assert loss_feat(f, -f).item() == pytest.approx(1.0)


def test_totals():
    w = LossWeights()
    assert total_np((0.4, 0.2, 0.1), w) == pytest.approx(0.7)
    assert total_np({"sup": 0.4, "un": 0.2, "ccr": 0.1}, LossWeights(ccr=0.0)) == pytest.approx(0.6)
    assert total_np((0, 0, 0), w) == 0
    assert total_p((0.4, 0.2, 0.3, 0.5, 0.1), w) == pytest.approx(1.5)
    conf_stage = LossWeights(0.0, 0.0, 0.0, 0.1, 1.0)
    assert total_p(LossBreakdown(sup=9, un=9, ccr=9, conf=2.0, conf_sup=0.5), conf_stage) == pytest.approx(0.7)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(sup=-1.0)
    with pytest.raises(ValueError):
        LossWeights(un=float("inf"))
    with pytest.raises(ValueError):
        LossWeights(ccr=float("nan"))


def test_unguided_pair():
    a, b = unguided_pair(3)
    assert a.tolist() == b.tolist() == [0.5] * 3


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 1000))
def test_losses_non_negative(n, y, seed):
    g = torch.Generator().manual_seed(seed)
    p = [torch.softmax(torch.randn(n, y, generator=g, dtype=D) * 3, -1) for _ in range(3)]
    c = torch.rand(n, generator=g, dtype=D) * 0.98 + 0.01
    assert loss_sup(p[0], torch.randint(0, y, (n,), generator=g)).item() >= 0
    assert loss_un(p[0], p[1], torch.ones(n)).item() >= 0
    assert loss_ccr(p[1], p[2], c, 1 - c).item() >= 0
    assert loss_conf_sup(c, (c > 0.5).to(D)).item() >= 0
    # conf loss is bounded below by its per-sample minimum
    from conmatch_kit.model import cross_entropy

    H = cross_entropy(p[0], p[1])
    lower = torch.where(H >= 1, 1 + torch.log(H), H).mean()
    assert loss_conf(p[0], p[1], c).item() >= lower.item() - 1e-12
