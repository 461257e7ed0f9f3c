"""Stage-wise training loop: encoder warm-up, estimator pre-training, fine-tuning."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from . import augment
from .checkpoint import load_arrays, module_arrays, restore_module, save_arrays
from .confidence import ConfidenceEstimator, build_estimator, np_confidence
from .datakit import BatchIterator, BatchPair, Dataset, UnlabeledPool
from .losses import (
    LossBreakdown,
    LossWeights,
    confidence_targets,
    loss_ccr,
    loss_conf,
    loss_conf_sup,
    loss_feat,
    loss_sup,
    loss_un,
    unguided_pair,
)
from .metrics import DegenerateLabels, auc_roc, confident_set, per_class_accuracy, predict, pseudo_quality
from .model import Classifier, NonFiniteLoss, build_classifier
from .pseudo import ThresholdState, curriculum_mask, fixed_threshold_mask, update_class_thresholds
from .rng import make_rng

MODES = ("baseline_fix", "baseline_flex", "conmatch_np", "conmatch_p", "ablation_unguided")
STAGES = ("encoder_pretrain", "conf_pretrain", "finetune")
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class AugConfig:
    weak_sigma: float = 0.05
    strong_sigma: float = 0.25
    p_mask: float = 0.3
    scale_lo: float = 0.8
    scale_hi: float = 1.2
    n_ops: int = 2
    ops: list = field(default_factory=lambda: [name for name, _ in augment.DEFAULT_STRONG_OPS])
    magnitude_lo: float = 0.0
    magnitude_hi: float = 1.0
    cutout: float = 0.5
    flip_prob: float = 0.5
    max_shift: float = 0.125


@dataclass
class EstimatorConfig:
    variant: str = "topk_norm"
    k: int = 0  # 0 picks max(1, classes // 2)
    proj_dim: int = 16
    width: int = 32
    depth: int = 3
    inputs: str = "both"
    sentinel: float = -30.0
    bn_momentum: float = 0.9


@dataclass
class StageWeights:
    encoder_pretrain: LossWeights = field(default_factory=lambda: LossWeights(1.0, 1.0, 0.0, 0.0, 0.0))
    conf_pretrain: LossWeights = field(default_factory=lambda: LossWeights(0.0, 0.0, 0.0, 0.1, 1.0))
    finetune: LossWeights = field(default_factory=lambda: LossWeights(1.0, 1.0, 1.0, 1.0, 1.0))


@dataclass
class TrainConfig:
    mode: str = "conmatch_np"
    B: int = 16
    mu: int = 7
    lr0: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    total_steps: int = 3000
    warmup_encoder_steps: int = 300
    conf_pretrain_steps: int = 300
    weights: StageWeights = field(default_factory=StageWeights)
    tau: float = 0.95
    gate: str = "fixed"  # fixed | flex; baseline_flex always uses flex
    flex_window: int = 1024
    similarity: str = "cross_entropy"
    similarity_eps: float = 1e-8
    pseudo: str = "one_hot"  # one_hot | sharpen
    sharpen_T: float = 0.5
    un_uses_estimator: bool = False
    widths: list = field(default_factory=lambda: [32, 32])
    activation: str = "relu"
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    ema_decay: float = 0.0
    eval_every: int = 100
    checkpoint_every: int = 0
    dtype: str = "float64"
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        for key in ("B", "mu", "total_steps", "eval_every"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be a positive integer")
        for key in ("warmup_encoder_steps", "conf_pretrain_steps", "checkpoint_every"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be non-negative")
        pretrain = self.conf_pretrain_steps if self.mode == "conmatch_p" else 0
        if self.warmup_encoder_steps + pretrain > self.total_steps:
            raise ConfigError("warmup_encoder_steps", "warm-up plus estimator pre-training exceeds total_steps")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau", "must lie in (0, 1]")
        if self.gate not in ("fixed", "flex"):
            raise ConfigError("gate", "must be 'fixed' or 'flex'")
        if self.pseudo not in ("one_hot", "sharpen"):
            raise ConfigError("pseudo", "must be 'one_hot' or 'sharpen'")
        if self.similarity not in ("cross_entropy", "l2", "cosine"):
            raise ConfigError("similarity", "must be cross_entropy, l2 or cosine")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype", "must be float64 or float32")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay", "must lie in [0, 1)")
        if self.lr0 <= 0:
            raise ConfigError("lr0", "must be positive")
        if self.mode == "conmatch_p" and self.conf_pretrain_steps > 0:
            w = self.weights.conf_pretrain
            if w.conf == 0 and w.conf_sup == 0:
                raise ConfigError("weights.conf_pretrain.conf", "parametric mode pre-trains the estimator with zero loss weight")

    @property
    def parametric(self) -> bool:
        return self.mode == "conmatch_p"

    @property
    def uses_ccr(self) -> bool:
        return self.mode in ("conmatch_np", "conmatch_p", "ablation_unguided")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


def stage_of(step: int, config: TrainConfig) -> str:
    if not 0 <= step < config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps})")
    if step < config.warmup_encoder_steps:
        return "encoder_pretrain"
    if config.parametric and step < config.warmup_encoder_steps + config.conf_pretrain_steps:
        return "conf_pretrain"
    return "finetune"


def cosine_lr(step: int, lr0: float, total_steps: int) -> float:
    return lr0 * math.cos(7.0 * math.pi * step / (16.0 * total_steps))


@torch.no_grad()
def sgd_update(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    nesterov: bool = False,
    buffers: dict[str, torch.Tensor] | None = None,
) -> dict[str, torch.Tensor]:
    """One momentum-SGD step; weight decay enters as ``wd * theta`` added to the gradient.

    ``buffers`` (momentum state) is updated in place when given.
    """
    buffers = {} if buffers is None else buffers
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        if weight_decay:
            g = g + weight_decay * p
        if momentum:
            buf = buffers.get(name)
            buf = g.clone() if buf is None else buf * momentum + g
            buffers[name] = buf
            g = g + momentum * buf if nesterov else buf
        out[name] = p - lr * g
    return out


@dataclass
class Policies:
    weak: augment.AugPolicy
    strong: augment.AugPolicy

    @classmethod
    def from_config(cls, aug: AugConfig, feature_std) -> "Policies":
        ops = [(name, (aug.magnitude_lo, aug.magnitude_hi)) for name in aug.ops]
        weak = augment.weak_policy(feature_std, aug.weak_sigma, flip_prob=aug.flip_prob, max_shift=aug.max_shift)
        strong = augment.strong_policy(
            feature_std, aug.strong_sigma, aug.p_mask, (aug.scale_lo, aug.scale_hi), ops,
            n_ops_per_call=aug.n_ops, cutout=aug.cutout,
        )
        return cls(weak, strong)


@dataclass
class TrainState:
    step: int
    model: Classifier
    estimator: ConfidenceEstimator | None
    thresholds: ThresholdState | None
    model_buffers: dict = field(default_factory=dict)
    estimator_buffers: dict = field(default_factory=dict)
    ema: Classifier | None = None


def init_state(config: TrainConfig, input_shape, n_classes: int) -> TrainState:
    dtype = config.torch_dtype
    model = build_classifier(input_shape, n_classes, config.widths, config.activation, seed=config.seed, dtype=dtype)
    estimator = None
    if config.parametric:
        e = config.estimator
        estimator = build_estimator(
            model.feature_dim, n_classes, seed=config.seed + 1, dtype=dtype,
            variant=e.variant, k=e.k or None, proj_dim=e.proj_dim, width=e.width, depth=e.depth,
            inputs=e.inputs, sentinel=e.sentinel, bn_momentum=e.bn_momentum,
        )
    gate = "flex" if config.mode == "baseline_flex" else config.gate
    thresholds = ThresholdState(config.tau, n_classes, config.flex_window) if gate == "flex" else None
    ema = copy.deepcopy(model) if config.ema_decay > 0 else None
    return TrainState(0, model, estimator, thresholds, ema=ema)


def _augment_views(batch: BatchPair, config: TrainConfig, policies: Policies, step: int):
    seed = config.seed
    xl = augment.augment_batch(batch.labeled_x, policies.weak, make_rng(seed, "aug", step, 0))
    uw = augment.augment_batch(batch.unlabeled_x, policies.weak, make_rng(seed, "aug", step, 1))
    us_i = augment.augment_batch(batch.unlabeled_x, policies.strong, make_rng(seed, "aug", step, 2))
    us_j = augment.augment_batch(batch.unlabeled_x, policies.strong, make_rng(seed, "aug", step, 3))
    return xl, uw, us_i, us_j


def _check(term: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value):
        raise NonFiniteLoss(term, value.item())
    return value


def _apply(module: torch.nn.Module, new: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(new[name])


@dataclass
class StepTerms:
    """Loss terms of one step before any parameter update."""

    stage: str
    weights: LossWeights
    terms: dict
    total: torch.Tensor
    train_theta: bool
    train_conf: bool


def compute_terms(state: TrainState, batch: BatchPair, config: TrainConfig, policies: Policies) -> StepTerms:
    """Forward passes and loss terms for ``state.step``; advances the curriculum window only."""
    step = state.step
    stage = stage_of(step, config)
    weights: LossWeights = getattr(config.weights, stage)
    model, est = state.model, state.estimator
    dtype = config.torch_dtype
    B, n_u = len(batch.labeled_y), len(batch.unlabeled_x)

    train_theta = stage != "conf_pretrain"
    train_conf = est is not None and stage in ("conf_pretrain", "finetune")

    views = _augment_views(batch, config, policies, step)
    x = torch.as_tensor(np.concatenate(views), dtype=dtype)
    model.train()
    with torch.set_grad_enabled(train_theta):
        out = model(x)
    sizes = [B, n_u, n_u, n_u]
    F_l, F_w, F_i, F_j = out.features.split(sizes)
    L_l, L_w, L_i, L_j = out.logits.split(sizes)
    p_l, p_w, p_i, p_j = out.probs.split(sizes)
    y = torch.as_tensor(batch.labeled_y, dtype=torch.long)

    terms: dict[str, torch.Tensor] = {}

    # estimator on detached model outputs: [strong i | strong j | labeled weak]
    c_i = c_j = c_l = None
    if est is not None and (train_conf or config.un_uses_estimator):
        est.train(train_conf)
        c_all = est(
            torch.cat([F_i, F_j, F_l]).detach(),
            torch.cat([L_i, L_j, L_l]).detach(),
        )
        c_i, c_j, c_l = c_all.split([n_u, n_u, B])

    if train_theta:
        if state.thresholds is not None:
            mask = curriculum_mask(p_w, state.thresholds)
            state.thresholds = update_class_thresholds(state.thresholds, p_w)
        else:
            mask = fixed_threshold_mask(p_w, config.tau)
        if config.un_uses_estimator and est is not None and stage == "finetune":
            with torch.no_grad():
                c_weak = est.eval()(F_w.detach(), L_w.detach())
            est.train(train_conf)
            mask = mask * c_weak
        un_kw = dict(pseudo=config.pseudo, T=config.sharpen_T)
        terms["sup"] = loss_sup(p_l, y)
        terms["un"] = 0.5 * (loss_un(p_w, p_i, mask, **un_kw) + loss_un(p_w, p_j, mask, **un_kw))
        if stage == "finetune" and config.uses_ccr:
            if config.mode == "conmatch_p":
                ci, cj = c_i.detach(), c_j.detach()
            elif config.mode == "conmatch_np":
                if config.similarity == "cosine":
                    pair = np_confidence(F_w, F_i, F_j, "cosine", config.similarity_eps)
                else:
                    pair = np_confidence(p_w, p_i, p_j, config.similarity, config.similarity_eps)
                ci, cj = pair.c_i, pair.c_j
            else:
                ci, cj = unguided_pair(n_u, dtype)
            terms["ccr"] = loss_ccr(p_i, p_j, ci, cj, **un_kw)
        if weights.feat > 0:
            terms["feat"] = loss_feat(F_i, F_j)

    if train_conf:
        terms["conf"] = loss_conf(p_w.detach(), (p_i.detach(), p_j.detach()), (c_i, c_j))
        terms["conf_sup"] = loss_conf_sup(c_l, confidence_targets(p_l, y))

    for name, value in terms.items():
        _check(name, value)
    total = sum(getattr(weights, name) * value for name, value in terms.items())
    _check("total", total)
    return StepTerms(stage, weights, terms, total, train_theta, train_conf)


def train_step(state: TrainState, batch: BatchPair, config: TrainConfig, policies: Policies) -> tuple[TrainState, LossBreakdown]:
    """Advance ``state`` by one optimisation step (in place) and return it with the loss terms.

    theta follows the sup/un/ccr terms and theta_conf the conf/conf_sup terms;
    each term only reaches its own parameter group (the others are detached).
    """
    st = compute_terms(state, batch, config, policies)
    model, est = state.model, state.estimator
    lr = cosine_lr(state.step, config.lr0, config.total_steps)
    groups = []
    if st.train_theta:
        groups.append((model, state.model_buffers))
    if st.train_conf:
        groups.append((est, state.estimator_buffers))
    params = [p for module, _ in groups for p in module.parameters()]
    if params and st.total.requires_grad:
        grads = torch.autograd.grad(st.total, params, allow_unused=True)
        it = iter(grads)
        for module, buffers in groups:
            named = dict(module.named_parameters())
            g = {n: (gr if gr is not None else torch.zeros_like(p)) for (n, p), gr in zip(named.items(), it)}
            new = sgd_update(
                {n: p.detach() for n, p in named.items()}, g, lr,
                config.momentum, config.weight_decay, config.nesterov, buffers,
            )
            _apply(module, new)

    if state.ema is not None and st.train_theta:
        with torch.no_grad():
            for pe, pm in zip(state.ema.parameters(), model.parameters()):
                pe.mul_(config.ema_decay).add_(pm, alpha=1.0 - config.ema_decay)

    state.step += 1
    breakdown = LossBreakdown(**{k: v.item() for k, v in st.terms.items()}, total=st.total.item())
    return state, breakdown


def evaluate(state: TrainState, config: TrainConfig, pool: UnlabeledPool, test: Dataset, policies: Policies) -> dict:
    """Test error, per-class accuracy, pseudo-label quality and confidence AUC.

    Confidence is scored on one fixed strong view per unlabeled sample: the
    estimator output in parametric mode, the peak class probability otherwise.
    Pseudo-label quality uses the view each method draws targets from (strong
    view + estimator > 0.5, or weak view + peak probability >= tau).
    """
    model = state.ema if state.ema is not None else state.model
    _, _, test_probs = predict(model, test.inputs)
    test_pred = test_probs.argmax(dim=-1).numpy()
    record = {
        "test_error": float(np.mean(test_pred != test.labels)),
        "per_class_acc": per_class_accuracy(test_pred, test.labels, test.n_classes),
    }
    if pool.eval_labels is None:
        return record
    truth = pool.eval_labels
    weak_x = augment.augment_batch(pool.inputs, policies.weak, make_rng(config.seed, "eval-aug", 0))
    strong_x = augment.augment_batch(pool.inputs, policies.strong, make_rng(config.seed, "eval-aug", 1))
    _, _, p_weak = predict(model, weak_x)
    F_s, L_s, p_strong = predict(model, strong_x)
    strong_pred = p_strong.argmax(dim=-1).numpy()
    strong_peak = p_strong.max(dim=-1).values.numpy()
    strong_correct = strong_pred == truth
    if state.estimator is not None:
        est = state.estimator
        was = est.training
        est.eval()
        with torch.no_grad():
            conf = est(F_s, L_s).numpy()
        est.train(was)
        q = pseudo_quality(strong_pred, truth, confident_set(conf, "estimator"))
        source = "estimator"
    else:
        conf = strong_peak
        weak_pred = p_weak.argmax(dim=-1).numpy()
        weak_peak = p_weak.max(dim=-1).values.numpy()
        q = pseudo_quality(weak_pred, truth, confident_set(weak_peak, "max_prob", config.tau))
        source = "max_prob"
    record["pseudo"] = {"precision": q.precision, "recall": q.recall, "f1": q.f1, "n_confident": q.n_confident}
    record["strong_view_error"] = float(1.0 - strong_correct.mean())
    record["confidence_source"] = source
    for key, scores in (("auc", conf), ("auc_max_prob", strong_peak)):
        try:
            record[key] = auc_roc(scores, strong_correct)
        except DegenerateLabels:
            record[key] = None
    return record


class Trainer:
    """Owns data streams, policies and state for one training run."""

    def __init__(self, config: TrainConfig, labeled: Dataset, pool: UnlabeledPool, test: Dataset, state: TrainState | None = None):
        config.validate()
        self.config = config
        self.labeled = labeled
        self.pool = pool
        self.test = test
        flat = np.asarray(pool.inputs, dtype=np.float64)
        feature_std = flat.std(axis=0) if flat.ndim == 2 else 1.0
        self.policies = Policies.from_config(config.aug, feature_std)
        self.batches = BatchIterator(labeled, pool, config.B, config.mu, config.seed)
        self.state = state or init_state(config, labeled.input_shape, labeled.n_classes)
        self._acc: dict[str, float] = {}
        self._acc_n = 0

    def step(self) -> LossBreakdown:
        batch = self.batches.batch(self.state.step)
        _, breakdown = train_step(self.state, batch, self.config, self.policies)
        for k, v in breakdown.as_dict().items():
            self._acc[k] = self._acc.get(k, 0.0) + v
        self._acc_n += 1
        return breakdown

    def _record(self, last_stage: str) -> dict:
        loss = {k: v / self._acc_n for k, v in self._acc.items()}
        self._acc, self._acc_n = {}, 0
        record = {
            "schema_version": SCHEMA_VERSION,
            "step": self.state.step,
            "stage": last_stage,
            "lr": cosine_lr(self.state.step - 1, self.config.lr0, self.config.total_steps),
            "loss": loss,
        }
        record.update(evaluate(self.state, self.config, self.pool, self.test, self.policies))
        return record

    def run(self, until: int | None = None, checkpoint_dir: str | Path | None = None) -> Iterator[dict]:
        """Train to ``until`` (default: total_steps), yielding a record every ``eval_every`` steps."""
        until = self.config.total_steps if until is None else min(until, self.config.total_steps)
        cfg = self.config
        while self.state.step < until:
            stage = stage_of(self.state.step, cfg)
            self.step()
            done = self.state.step
            if done % cfg.eval_every == 0 or done == cfg.total_steps:
                yield self._record(stage)
            if checkpoint_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                self.save_checkpoint(Path(checkpoint_dir) / f"step{done:07d}")

    # --- checkpoints -------------------------------------------------------------

    def save_checkpoint(self, prefix: str | Path) -> Path:
        s = self.state
        arrays = module_arrays(s.model, "model")
        if s.estimator is not None:
            arrays.update(module_arrays(s.estimator, "conf"))
        if s.ema is not None:
            arrays.update(module_arrays(s.ema, "ema"))
        arrays.update({f"opt/model/{k}": v for k, v in s.model_buffers.items()})
        arrays.update({f"opt/conf/{k}": v for k, v in s.estimator_buffers.items()})
        if s.thresholds is not None:
            arrays["thresholds/window"] = np.asarray(list(s.thresholds.window), dtype=np.int64)
        meta = {"step": s.step, "loss_acc": self._acc, "loss_acc_n": self._acc_n}
        return save_arrays(prefix, arrays, meta)

    def load_checkpoint(self, prefix: str | Path) -> None:
        arrays, meta = load_arrays(prefix)
        s = init_state(self.config, self.labeled.input_shape, self.labeled.n_classes)
        restore_module(s.model, arrays, "model")
        if s.estimator is not None:
            restore_module(s.estimator, arrays, "conf")
        if s.ema is not None:
            restore_module(s.ema, arrays, "ema")
        for key, value in arrays.items():
            if key.startswith("opt/model/"):
                s.model_buffers[key[len("opt/model/"):]] = torch.from_numpy(value)
            elif key.startswith("opt/conf/"):
                s.estimator_buffers[key[len("opt/conf/"):]] = torch.from_numpy(value)
        if s.thresholds is not None:
            s.thresholds.window.extend(arrays.get("thresholds/window", np.zeros(0, np.int64)).tolist())
        s.step = int(meta["step"])
        self.state = s
        self._acc = dict(meta["loss_acc"])
        self._acc_n = int(meta["loss_acc_n"])
