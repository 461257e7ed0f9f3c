"""Pseudo-labels and the threshold gates that decide which ones are used."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import one_hot_argmax, sharpen


@dataclass
class PseudoLabel:
    q: torch.Tensor
    hard_class: torch.Tensor
    mask: torch.Tensor | None = None


def _probs(p) -> torch.Tensor:
    return p if torch.is_tensor(p) else torch.as_tensor(np.asarray(p, dtype=np.float64))


def make_pseudo_label(p, mode: str = "one_hot", T: float = 1.0) -> PseudoLabel:
    """Target distribution from a prediction; always detached from the graph."""
    p = _probs(p).detach()
    if mode == "one_hot":
        q = one_hot_argmax(p)
    elif mode == "sharpen":
        q = sharpen(p, T)
    else:
        raise ValueError(f"unknown pseudo-label mode {mode!r}")
    return PseudoLabel(q=q, hard_class=p.argmax(dim=-1))


def fixed_threshold_mask(p, tau: float) -> torch.Tensor:
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    p = _probs(p).detach()
    return (p.max(dim=-1).values >= tau).to(p.dtype)


@dataclass
class ThresholdState:
    """Per-class curriculum thresholds (FlexMatch-style, linear mapping).

    ``window`` holds the most recent unlabeled predictions as class indices,
    with -1 for predictions below ``tau``; ``sigma`` counts confident ones per class.
    """

    tau: float
    n_classes: int
    window_size: int = 1024
    window: deque = field(default_factory=deque)

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        self.window = deque(self.window, maxlen=self.window_size)

    @property
    def per_class_sigma(self) -> np.ndarray:
        cls = np.fromiter(self.window, dtype=np.int64, count=len(self.window))
        return np.bincount(cls[cls >= 0], minlength=self.n_classes)

    @property
    def per_class_T(self) -> np.ndarray:
        return thresholds_from_counts(self.per_class_sigma, self.tau)

    def copy(self) -> "ThresholdState":
        return ThresholdState(self.tau, self.n_classes, self.window_size, deque(self.window))


def thresholds_from_counts(sigma, tau: float) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    beta = sigma / max(sigma.max(initial=0.0), 1.0)
    return beta * tau


def update_class_thresholds(state: ThresholdState, batch_preds) -> ThresholdState:
    p = _probs(batch_preds).detach()
    if p.ndim == 1:
        p = p[None]
    peak, cls = p.max(dim=-1)
    cls = torch.where(peak >= state.tau, cls, torch.full_like(cls, -1))
    new = state.copy()
    new.window.extend(cls.tolist())
    return new


def curriculum_mask(p, state: ThresholdState) -> torch.Tensor:
    p = _probs(p).detach()
    peak, cls = p.max(dim=-1)
    T = torch.as_tensor(state.per_class_T, dtype=p.dtype)
    return (peak >= T[cls]).to(p.dtype)
