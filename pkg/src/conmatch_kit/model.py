"""Encoder + classifier network, probability primitives and gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .checkpoint import load_arrays, module_arrays, restore_module, save_arrays

PROB_FLOOR = 1e-12

ACTIVATIONS = {"relu": nn.ReLU, "gelu": nn.GELU, "tanh": nn.Tanh, "softplus": nn.Softplus}


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value=None):
        self.term = term
        super().__init__(f"non-finite value in loss term {term!r}: {value}")


@dataclass
class ForwardOut:
    features: torch.Tensor
    logits: torch.Tensor
    probs: torch.Tensor


def floor_probs(p: torch.Tensor) -> torch.Tensor:
    p = p.clamp_min(PROB_FLOOR)
    return p / p.sum(dim=-1, keepdim=True)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def cross_entropy(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """-sum_y q_y log p_y over the last axis, with p floored at 1e-12 and renormalised."""
    q = torch.as_tensor(q, dtype=torch.float64) if not torch.is_tensor(q) else q
    p = torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
    return -(q * torch.log(floor_probs(p))).sum(dim=-1)


def sharpen(p: torch.Tensor, T: float) -> torch.Tensor:
    if T <= 0:
        raise ValueError("temperature must be positive")
    p = torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
    # work in log space so tiny T does not underflow to 0/0
    logp = torch.log(p.clamp_min(torch.finfo(p.dtype).tiny)) / T
    return torch.softmax(logp, dim=-1)


def one_hot_argmax(p: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
    return nn.functional.one_hot(p.argmax(dim=-1), p.shape[-1]).to(p.dtype)


class Classifier(nn.Module):
    """MLP feature encoder f followed by a linear classifier g."""

    def __init__(
        self,
        input_shape: int | tuple[int, ...],
        n_classes: int,
        widths: Iterable[int] = (32, 32),
        activation: str = "relu",
    ):
        super().__init__()
        self.input_shape = (input_shape,) if isinstance(input_shape, int) else tuple(input_shape)
        self.n_classes = n_classes
        self.widths = tuple(widths)
        layers: list[nn.Module] = []
        width = int(np.prod(self.input_shape))
        for out in self.widths:
            layers += [nn.Linear(width, out), ACTIVATIONS[activation]()]
            width = out
        self.encoder = nn.Sequential(*layers)
        self.classifier = nn.Linear(width, n_classes)
        self.feature_dim = width

    def forward(self, x: torch.Tensor) -> ForwardOut:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(f"expected inputs of shape (N, {self.input_shape}), got {tuple(x.shape)}")
        features = self.encoder(x.reshape(len(x), -1))
        logits = self.classifier(features)
        return ForwardOut(features, logits, softmax(logits))


def build_classifier(
    input_shape, n_classes: int, widths=(32, 32), activation: str = "relu", seed: int = 0, dtype=torch.float64
) -> Classifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Classifier(input_shape, n_classes, widths, activation)
    return model.to(dtype)


def forward(model: nn.Module, x, params: Mapping[str, torch.Tensor] | None = None) -> ForwardOut:
    """Run ``model`` on ``x``; ``params`` overrides the module's own tensors."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=dtype)
    if params is None:
        return model(x)
    return functional_call(model, dict(params), (x,))


def gradient(
    loss_fn: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    stop_set: Iterable[str] = (),
    term: str = "loss",
) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of ``loss_fn(params)``.

    Names in ``stop_set`` enter the computation as constants and get an
    all-zero gradient.
    """
    stop = set(stop_set)
    unknown = stop - set(params)
    if unknown:
        raise KeyError(f"stop_set names unknown parameters: {sorted(unknown)}")
    leaves = {
        name: (p.detach() if name in stop else p.detach().clone().requires_grad_(True)) for name, p in params.items()
    }
    value = loss_fn(leaves)
    if not torch.isfinite(value).all():
        raise NonFiniteLoss(term, value.item())
    live = [n for n in leaves if n not in stop]
    grads = torch.autograd.grad(value, [leaves[n] for n in live], allow_unused=True) if live and value.requires_grad else [None] * len(live)
    out = {name: torch.zeros_like(p) for name, p in params.items()}
    for name, g in zip(live, grads):
        if g is not None:
            out[name] = g
    return out


def param_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    return dict(model.named_parameters())


def save_params(model: nn.Module, prefix, namespace: str = "model"):
    meta = {"namespace": namespace, "dtype": str(next(model.parameters()).dtype)}
    return save_arrays(prefix, module_arrays(model, namespace), meta)


def load_params(model: nn.Module, prefix, namespace: str = "model") -> nn.Module:
    arrays, _ = load_arrays(prefix)
    restore_module(model, arrays, namespace)
    return model
