"""Training objectives.

All functions take model outputs rather than models, so the caller decides
which forward passes run under a frozen network. Targets (pseudo-labels,
confidences used as weights, anchors) are detached here.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import torch

from .model import cross_entropy
from .pseudo import make_pseudo_label

TERMS = ("sup", "un", "ccr", "conf", "conf_sup", "feat")


class DomainError(ValueError):
    pass


@dataclass
class LossWeights:
    sup: float = 1.0
    un: float = 1.0
    ccr: float = 1.0
    conf: float = 1.0
    conf_sup: float = 1.0
    feat: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v != float("inf")):
                raise ValueError(f"loss weight {f.name} must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    sup: float = 0.0
    un: float = 0.0
    ccr: float = 0.0
    conf: float = 0.0
    conf_sup: float = 0.0
    feat: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _mean(x: torch.Tensor) -> torch.Tensor:
    # fixed-order reduction; an empty batch contributes 0
    return x.sum() / max(x.numel(), 1)


def loss_sup(probs: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy of weak-view predictions against the true labels."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(labels) == 0:
        raise ValueError("labeled batch is empty")
    q = torch.nn.functional.one_hot(labels, probs.shape[-1]).to(probs.dtype)
    return _mean(cross_entropy(q, probs))


def loss_un(p_weak: torch.Tensor, p_strong: torch.Tensor, mask, pseudo: str = "one_hot", T: float = 1.0) -> torch.Tensor:
    q = make_pseudo_label(p_weak, pseudo, T).q
    mask = torch.as_tensor(mask, dtype=p_strong.dtype).detach()
    return _mean(mask * cross_entropy(q, p_strong))


def loss_ccr(p_i: torch.Tensor, p_j: torch.Tensor, c_i, c_j, pseudo: str = "one_hot", T: float = 1.0) -> torch.Tensor:
    """Each strong view's pseudo-label supervises the other, weighted by its confidence."""
    q_i = make_pseudo_label(p_i, pseudo, T).q
    q_j = make_pseudo_label(p_j, pseudo, T).q
    c_i = torch.as_tensor(c_i, dtype=p_i.dtype).detach()
    c_j = torch.as_tensor(c_j, dtype=p_i.dtype).detach()
    return _mean(c_i * cross_entropy(q_i, p_j) + c_j * cross_entropy(q_j, p_i))


def conf_objective(c, H):
    """Per-sample c * H + log(1 / c); minimised over c at c = 1 / H (capped by the range of c)."""
    return c * H - torch.log(c)


def loss_conf(p_weak: torch.Tensor, p_strong, c) -> torch.Tensor:
    """Mean of c * H(p_weak, p_strong) + log(1 / c).

    ``p_strong`` and ``c`` may be sequences (one entry per strong view); the
    mean then runs over views as well. Model outputs are detached.
    """
    if torch.is_tensor(p_strong):
        p_strong, c = (p_strong,), (c,)
    anchor = p_weak.detach()
    per_view = []
    for p, conf in zip(p_strong, c):
        if (conf <= 0).any():
            raise DomainError("confidence must be strictly positive")
        per_view.append(conf_objective(conf, cross_entropy(anchor, p.detach())))
    return _mean(torch.stack(per_view))


def confidence_targets(probs: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    return (probs.detach().argmax(dim=-1) == labels).to(probs.dtype)


def loss_conf_sup(c: torch.Tensor, c_gt) -> torch.Tensor:
    c_gt = torch.as_tensor(c_gt, dtype=c.dtype)
    return torch.nn.functional.binary_cross_entropy(c, c_gt)


def loss_feat(f_i: torch.Tensor, f_j: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity between the strong views' features, symmetric
    with a stop-gradient on the target side. No negative pairs."""
    cos = torch.nn.functional.cosine_similarity
    return -0.5 * (_mean(cos(f_i, f_j.detach(), dim=-1)) + _mean(cos(f_j, f_i.detach(), dim=-1)))


def _weighted(components, weights: LossWeights, terms: Sequence[str]):
    if isinstance(components, LossBreakdown):
        components = components.as_dict()
    elif not isinstance(components, Mapping):
        components = dict(zip(terms, components))
    return sum(getattr(weights, t) * components.get(t, 0.0) for t in terms)


def total_np(components, weights: LossWeights):
    """sup, un and ccr terms; positional components follow that order."""
    return _weighted(components, weights, ("sup", "un", "ccr"))


def total_p(components, weights: LossWeights):
    """sup, un, conf, conf_sup and ccr terms; positional components follow that order."""
    return _weighted(components, weights, ("sup", "un", "conf", "conf_sup", "ccr"))


def unguided_pair(n: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    half = torch.full((n,), 0.5, dtype=dtype)
    return half, half.clone()

