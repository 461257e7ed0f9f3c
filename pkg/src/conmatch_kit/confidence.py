"""Confidence of strong-branch pseudo-labels.

Two estimators: a closed-form one that compares each strong view with the
weak-view anchor, and a small learnable network h(F, L) on features and
(top-k masked) logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .model import ACTIVATIONS, ShapeMismatch, cross_entropy

SIMILARITIES = ("cross_entropy", "l2", "cosine")
VARIANTS = ("basic", "reduced", "topk", "topk_norm")


@dataclass
class ConfidencePair:
    c_i: torch.Tensor
    c_j: torch.Tensor


def _t(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def similarity(anchor, strong, kind: str = "cross_entropy", eps: float = 1e-8) -> torch.Tensor:
    """Similarity of a strong view to its weak anchor; larger means more alike.

    ``cross_entropy`` and ``l2`` take probability vectors, ``cosine`` takes
    feature vectors.
    """
    anchor, strong = _t(anchor), _t(strong)
    if kind == "cross_entropy":
        return 1.0 / cross_entropy(anchor, strong).clamp_min(eps)
    if kind == "l2":
        return 1.0 / torch.linalg.vector_norm(strong - anchor, dim=-1).clamp_min(eps)
    if kind == "cosine":
        cos = nn.functional.cosine_similarity(strong, anchor, dim=-1, eps=1e-12)
        return (1.0 + cos) / 2.0 + eps
    raise ValueError(f"unknown similarity {kind!r}; choose from {SIMILARITIES}")


def np_confidence(anchor, strong_i, strong_j, kind: str = "cross_entropy", eps: float = 1e-8) -> ConfidencePair:
    """c_i = s_i / (s_i + s_j); all inputs are treated as constants."""
    anchor, strong_i, strong_j = (_t(a).detach() for a in (anchor, strong_i, strong_j))
    s_i = similarity(anchor, strong_i, kind, eps)
    s_j = similarity(anchor, strong_j, kind, eps)
    total = s_i + s_j
    return ConfidencePair(s_i / total, s_j / total)


def topk_mask(logits, k: int, sentinel: float = -30.0) -> torch.Tensor:
    """Replace all but the k largest logits with ``sentinel``; length is unchanged.

    Among tied values the lowest indices are kept.
    """
    logits = _t(logits)
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if k == n:
        return logits
    order = torch.sort(-logits, dim=-1, stable=True).indices[..., :k]
    keep = torch.zeros_like(logits, dtype=torch.bool).scatter(-1, order, True)
    return torch.where(keep, logits, torch.full_like(logits, sentinel))


def trunk_widths(variant: str, width: int, depth: int) -> list[int]:
    if variant == "basic":
        return [width] * depth
    return [max(1, width >> i) for i in range(depth)]


class ConfidenceEstimator(nn.Module):
    """h(F, L): projection heads on features and logits, an MLP trunk and a
    squashed scalar output in (delta, 1 - delta)."""

    def __init__(
        self,
        feature_dim: int,
        n_classes: int,
        variant: str = "topk_norm",
        k: int | None = None,
        proj_dim: int = 16,
        width: int = 32,
        depth: int = 3,
        inputs: str = "both",
        sentinel: float = -30.0,
        bn_momentum: float = 0.9,
        delta: float = 1e-6,
        activation: str = "relu",
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown estimator variant {variant!r}; choose from {VARIANTS}")
        if inputs not in ("both", "logits"):
            raise ValueError("inputs must be 'both' or 'logits'")
        act = ACTIVATIONS[activation]
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        self.variant = variant
        self.k = min(n_classes, k if k is not None else max(1, n_classes // 2))
        self.use_topk = variant in ("topk", "topk_norm")
        self.inputs = inputs
        self.sentinel = sentinel
        self.delta = delta

        if inputs == "both":
            self.feature_proj = nn.Sequential(nn.Linear(feature_dim, proj_dim), act())
        self.logit_proj = nn.Sequential(nn.Linear(n_classes, proj_dim), act())
        layers: list[nn.Module] = []
        fan_in = proj_dim * (2 if inputs == "both" else 1)
        for w in trunk_widths(variant, width, depth):
            layers.append(nn.Linear(fan_in, w))
            if variant == "topk_norm":
                # torch's momentum weights the new batch: running = (1 - m) * running + m * batch
                layers.append(nn.BatchNorm1d(w, momentum=1.0 - bn_momentum))
            layers.append(act())
            fan_in = w
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(fan_in, 1)

    def forward(self, features: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
        if logits.shape[-1] != self.n_classes or (self.inputs == "both" and features.shape[-1] != self.feature_dim):
            raise ShapeMismatch(
                f"expected features (..., {self.feature_dim}) and logits (..., {self.n_classes}), "
                f"got {tuple(features.shape)} and {tuple(logits.shape)}"
            )
        if self.use_topk:
            logits = topk_mask(logits, self.k, self.sentinel)
        parts = [self.feature_proj(features)] if self.inputs == "both" else []
        parts.append(self.logit_proj(logits))
        z = self.head(self.trunk(torch.cat(parts, dim=-1))).squeeze(-1)
        return self.delta + (1.0 - 2.0 * self.delta) * torch.sigmoid(z)


def build_estimator(feature_dim: int, n_classes: int, seed: int = 0, dtype=torch.float64, **kw) -> ConfidenceEstimator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        est = ConfidenceEstimator(feature_dim, n_classes, **kw)
    return est.to(dtype)


def conf_forward(estimator: ConfidenceEstimator, features, logits) -> torch.Tensor:
    """Confidence for one sample (1-D inputs) or a batch."""
    features, logits = _t(features), _t(logits)
    single = logits.ndim == 1
    if single:
        features, logits = features[None], logits[None]
    c = estimator(features, logits)
    return c[0] if single else c
