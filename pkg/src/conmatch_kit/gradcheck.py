"""Central finite-difference checks of the autograd gradients of every loss.

Each case builds a random small model in float64 and compares
``torch.autograd`` gradients with central differences. Quantities that the
losses treat as constants (pseudo-labels, confidences used as weights, gate
masks, frozen model outputs) are evaluated once at the base point and held
fixed, which is exactly what a stop-gradient means for the derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .confidence import build_estimator, np_confidence
from .losses import confidence_targets, loss_ccr, loss_conf, loss_conf_sup, loss_sup, loss_un
from .model import build_classifier

LOSSES = ("sup", "un", "ccr", "conf", "conf_sup")
# smooth activations only: finite differences straddling a ReLU kink are meaningless
ACTIVATIONS = ("tanh", "softplus", "gelu")
VARIANTS = ("basic", "reduced", "topk", "topk_norm")


def central_difference(fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor], h: float = 1e-5) -> dict[str, torch.Tensor]:
    """d fn / d params by (f(x + h) - f(x - h)) / 2h, perturbing tensors in place."""
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                up = fn().item()
                flat[k] = orig - h
                down = fn().item()
                flat[k] = orig
                gflat[k] = (up - down) / (2 * h)
            out[name] = g
    return out


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-5) -> float:
    """Largest per-coordinate |a - n| / max(|a|, |n|, floor).

    The floor keeps near-zero coordinates from dividing central-difference
    roundoff (about 1e-10 at h = 1e-5) by a vanishing gradient.
    """
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        worst = max(worst, ((a - n).abs() / denom).max().item())
    return worst


@dataclass
class CaseResult:
    loss: str
    seed: int
    rel_error: float
    n_coords: int


def _case_data(seed: int):
    g = torch.Generator().manual_seed(seed)
    d_in = int(torch.randint(2, 6, (1,), generator=g))
    n_classes = int(torch.randint(2, 5, (1,), generator=g))
    widths = [int(torch.randint(3, 17, (1,), generator=g)) for _ in range(int(torch.randint(1, 3, (1,), generator=g)))]
    activation = ACTIVATIONS[seed % len(ACTIVATIONS)]
    n = 16
    x = {k: torch.randn(n, d_in, generator=g, dtype=torch.float64) for k in ("l", "w", "i", "j")}
    y = torch.randint(0, n_classes, (n,), generator=g)
    model = build_classifier(d_in, n_classes, widths, activation, seed=seed)
    return model, x, y, n_classes


def check_case(loss: str, seed: int, h: float = 1e-5) -> CaseResult:
    model, x, y, n_classes = _case_data(seed)
    theta = dict(model.named_parameters())

    if loss in ("conf", "conf_sup"):
        est = build_estimator(
            model.feature_dim, n_classes, seed=seed + 1, variant=VARIANTS[seed % len(VARIANTS)],
            proj_dim=4, width=8, depth=2, activation=ACTIVATIONS[seed % len(ACTIVATIONS)],
        )
        est.train()
        with torch.no_grad():
            frozen = {k: model(v) for k, v in x.items()}
        params = dict(est.named_parameters())

        if loss == "conf":
            def fn():
                c_i = est(frozen["i"].features, frozen["i"].logits)
                c_j = est(frozen["j"].features, frozen["j"].logits)
                return loss_conf(frozen["w"].probs, (frozen["i"].probs, frozen["j"].probs), (c_i, c_j))
        else:
            c_gt = confidence_targets(frozen["l"].probs, y)

            def fn():
                return loss_conf_sup(est(frozen["l"].features, frozen["l"].logits), c_gt)
    else:
        params = theta
        with torch.no_grad():
            base = {k: model(v).probs for k, v in x.items()}
            # one-hot targets jump where the top two classes tie; keep clear-margin rows
            top2 = [base[k].topk(2, dim=-1).values for k in ("i", "j")]
            keep = torch.stack([(t[:, 0] - t[:, 1]) >= 1e-3 for t in top2]).all(0)
            x = {k: (v[keep] if k in ("w", "i", "j") else v) for k, v in x.items()}
            base = {k: model(v).probs for k, v in x.items()}
        if loss == "sup":
            def fn():
                return loss_sup(model(x["l"]).probs, y)
        elif loss == "un":
            # gate halfway between neighbouring peak values so no sample sits on the boundary
            peaks = base["w"].max(-1).values.sort().values
            mid = len(peaks) // 2
            tau = float((peaks[mid - 1] + peaks[mid]) / 2)
            mask = (base["w"].max(-1).values >= tau).to(torch.float64)

            def fn():
                return loss_un(base["w"], model(x["i"]).probs, mask, "sharpen", 0.5)
        elif loss == "ccr":
            pair = np_confidence(base["w"], base["i"], base["j"])

            def fn():
                return loss_ccr(model(x["i"]).probs, model(x["j"]).probs, pair.c_i, pair.c_j)
        else:
            raise ValueError(f"unknown loss {loss!r}")

    value = fn()
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    analytic = {k: (g if g is not None else torch.zeros_like(p)) for (k, p), g in zip(params.items(), grads)}
    numeric = central_difference(fn, params, h)
    n_coords = sum(p.numel() for p in params.values())
    return CaseResult(loss, seed, max_relative_error(analytic, numeric), n_coords)


def run_suite(n_models: int = 20, seed: int = 0, h: float = 1e-5) -> list[CaseResult]:
    return [check_case(loss, seed + m, h) for m in range(n_models) for loss in LOSSES]
