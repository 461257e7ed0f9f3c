import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conmatch_kit.trainer import (
    MODES,
    STAGES,
    ConfigError,
    TrainConfig,
    compute_terms,
    cosine_lr,
    sgd_update,
    stage_of,
)

from _support import tiny_config, tiny_trainer


def _snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _bitwise_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# --- schedule ---------------------------------------------------------------------


def test_stage_boundaries_parametric():
    cfg = TrainConfig(mode="conmatch_p", total_steps=20000, warmup_encoder_steps=4000, conf_pretrain_steps=10000)
    assert stage_of(0, cfg) == "encoder_pretrain"
    assert stage_of(3999, cfg) == "encoder_pretrain"
    assert stage_of(4000, cfg) == "conf_pretrain"
    assert stage_of(13999, cfg) == "conf_pretrain"
    assert stage_of(14000, cfg) == "finetune"


def test_non_parametric_modes_skip_conf_pretrain():
    cfg = TrainConfig(mode="conmatch_np", total_steps=100, warmup_encoder_steps=10, conf_pretrain_steps=50)
    assert {stage_of(s, cfg) for s in range(100)} == {"encoder_pretrain", "finetune"}


@pytest.mark.parametrize("step", [-1, 100])
def test_stage_of_rejects_out_of_range(step):
    with pytest.raises(ValueError):
        stage_of(step, TrainConfig(total_steps=100, warmup_encoder_steps=10, conf_pretrain_steps=10))


@settings(max_examples=60, deadline=None)
@given(
    mode=st.sampled_from(MODES),
    total=st.integers(1, 400),
    warm=st.integers(0, 400),
    pre=st.integers(0, 400),
)
def test_stages_are_contiguous_and_ordered(mode, total, warm, pre):
    cfg = TrainConfig(mode=mode, total_steps=total, warmup_encoder_steps=warm, conf_pretrain_steps=pre)
    try:
        cfg.validate()
    except ConfigError:
        return
    seq = [STAGES.index(stage_of(s, cfg)) for s in range(total)]
    assert seq == sorted(seq)
    assert seq.count(0) == warm
    assert seq.count(1) == (pre if mode == "conmatch_p" else 0)


def test_validate_rejects_overlong_pretraining():
    with pytest.raises(ConfigError) as exc:
        TrainConfig(mode="conmatch_p", total_steps=10, warmup_encoder_steps=6, conf_pretrain_steps=6).validate()
    assert exc.value.key == "warmup_encoder_steps"


def test_unknown_mode_names_key():
    with pytest.raises(ConfigError) as exc:
        TrainConfig(mode="mixmatch").validate()
    assert exc.value.key == "mode"


# --- optimiser ---------------------------------------------------------------------


def test_cosine_lr_endpoints():
    assert cosine_lr(0, 0.03, 1000) == 0.03
    assert cosine_lr(1000, 0.03, 1000) == pytest.approx(0.03 * math.cos(7 * math.pi / 16))
    lrs = [cosine_lr(s, 0.03, 1000) for s in range(1001)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_sgd_update_matches_hand_recursion():
    rng = np.random.default_rng(0)
    p = torch.tensor(rng.normal(size=5))
    grads = [torch.tensor(rng.normal(size=5)) for _ in range(4)]
    lr, m, wd = 0.1, 0.9, 0.01
    buffers = {}
    cur = {"w": p.clone()}
    ref, v = p.numpy().copy(), None
    for g in grads:
        cur = sgd_update(cur, {"w": g}, lr, m, wd, True, buffers)
        d = g.numpy() + wd * ref
        v = d if v is None else m * v + d
        ref = ref - lr * (d + m * v)
    np.testing.assert_allclose(cur["w"].numpy(), ref, rtol=0, atol=1e-14)


def test_sgd_update_plain():
    out = sgd_update({"w": torch.tensor([1.0, 2.0])}, {"w": torch.tensor([0.5, -1.0])}, 0.1)
    assert torch.allclose(out["w"], torch.tensor([0.95, 2.1]))


def test_sgd_update_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_update({"w": torch.zeros(3)}, {"w": torch.zeros(2)}, 0.1)


# --- gradient routing ----------------------------------------------------------------


def _finetune_terms(mode="conmatch_p"):
    tr = tiny_trainer(mode, total_steps=12, warmup_encoder_steps=2, conf_pretrain_steps=2)
    for _ in range(4):
        tr.step()
    st_ = tr.state
    assert st_.step == 4
    terms = compute_terms(st_, tr.batches.batch(st_.step), tr.config, tr.policies)
    assert terms.stage == "finetune"
    return st_, terms


def test_confidence_losses_do_not_reach_theta():
    state, st_ = _finetune_terms()
    loss = st_.terms["conf"] + st_.terms["conf_sup"]
    grads = torch.autograd.grad(loss, list(state.model.parameters()), allow_unused=True)
    assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)


def test_ccr_does_not_reach_theta_conf():
    state, st_ = _finetune_terms()
    grads = torch.autograd.grad(st_.terms["ccr"], list(state.estimator.parameters()), allow_unused=True)
    assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)


def test_ccr_does_reach_theta():
    state, st_ = _finetune_terms()
    grads = torch.autograd.grad(st_.terms["ccr"], list(state.model.parameters()), allow_unused=True)
    assert any(g is not None and torch.count_nonzero(g) > 0 for g in grads)


def test_encoder_pretrain_freezes_estimator():
    tr = tiny_trainer("conmatch_p")
    before = _snapshot(tr.state.estimator)
    for _ in range(tr.config.warmup_encoder_steps):
        tr.step()
    assert _bitwise_equal(before, _snapshot(tr.state.estimator))


def test_conf_pretrain_freezes_model():
    tr = tiny_trainer("conmatch_p")
    for _ in range(tr.config.warmup_encoder_steps):
        tr.step()
    before = _snapshot(tr.state.model)
    est_before = _snapshot(tr.state.estimator)
    for _ in range(tr.config.conf_pretrain_steps):
        tr.step()
    assert _bitwise_equal(before, _snapshot(tr.state.model))
    assert not _bitwise_equal(est_before, _snapshot(tr.state.estimator))


@pytest.mark.parametrize("mode", MODES)
def test_every_mode_trains_finitely(mode):
    tr = tiny_trainer(mode)
    records = list(tr.run())
    assert [r["step"] for r in records] == [10, 20, 30]
    for r in records:
        assert all(math.isfinite(v) for v in r["loss"].values())
        assert 0.0 <= r["test_error"] <= 1.0


def test_baseline_has_no_ccr_term():
    tr = tiny_trainer("baseline_fix")
    records = list(tr.run())
    assert all(r["loss"]["ccr"] == 0.0 and r["loss"]["conf"] == 0.0 for r in records)


# --- determinism and resume -----------------------------------------------------------


def _stream(records):
    return [json.dumps(r, sort_keys=True) for r in records]


def test_identical_runs_identical_records():
    a = _stream(tiny_trainer("conmatch_p").run())
    b = _stream(tiny_trainer("conmatch_p").run())
    assert a == b


def test_different_seeds_differ():
    a = _stream(tiny_trainer("conmatch_p", seed=0).run())
    b = _stream(tiny_trainer("conmatch_p", seed=1).run())
    assert a != b


@pytest.mark.parametrize("mode,cut", [("conmatch_p", 13), ("baseline_flex", 17), ("conmatch_np", 20)])
def test_checkpoint_restore_reproduces_stream(tmp_path, mode, cut):
    full = _stream(tiny_trainer(mode).run())
    first = tiny_trainer(mode)
    head = _stream(first.run(until=cut))
    first.save_checkpoint(tmp_path / "mid")
    second = tiny_trainer(mode)
    second.load_checkpoint(tmp_path / "mid")
    tail = _stream(second.run())
    assert head + tail == full
