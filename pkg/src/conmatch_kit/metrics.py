"""Pseudo-label quality, confidence AUC-ROC and classification error."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch


class LengthMismatch(ValueError):
    pass


class DegenerateLabels(ValueError):
    pass


@dataclass
class PseudoQualityRecord:
    step: int
    precision: float
    recall: float
    f1: float
    n_confident: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConfidenceSample:
    confidence: float
    correct: bool


def confident_set(confidences, mode: str = "estimator", threshold: float = 0.5) -> np.ndarray:
    """Which samples count as confident.

    ``estimator``: confidence strictly above 0.5 (``threshold`` is ignored).
    ``max_prob``: ``confidences`` is a peak class probability, kept when >= threshold.
    """
    c = np.asarray(confidences, dtype=np.float64)
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    if mode == "estimator":
        return c > 0.5
    if mode == "max_prob":
        return c >= threshold
    raise ValueError(f"unknown confident-set mode {mode!r}")


def pseudo_quality(pred_classes, true_classes, confident_mask, step: int = 0) -> PseudoQualityRecord:
    """TP: confident and correct; FP: confident and wrong; FN: excluded but would be correct."""
    pred = np.asarray(pred_classes)
    true = np.asarray(true_classes)
    conf = np.asarray(confident_mask, dtype=bool)
    if not len(pred) == len(true) == len(conf):
        raise LengthMismatch(f"lengths {len(pred)}, {len(true)}, {len(conf)} differ")
    correct = pred == true
    tp = int(np.sum(conf & correct))
    fp = int(np.sum(conf & ~correct))
    fn = int(np.sum(~conf & correct))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return PseudoQualityRecord(step, precision, recall, f1, int(conf.sum()))


def auc_roc(confidences, correct=None) -> float:
    """Mann-Whitney AUC: P(conf of a correct sample > conf of a wrong one), ties count 1/2.

    Accepts either a list of ``ConfidenceSample`` or two parallel arrays.
    """
    if correct is None:
        samples = list(confidences)
        confidences = [s.confidence for s in samples]
        correct = [s.correct for s in samples]
    scores = np.asarray(confidences, dtype=np.float64)
    pos = np.asarray(correct, dtype=bool)
    if len(scores) != len(pos):
        raise LengthMismatch(f"{len(scores)} confidences vs {len(pos)} labels")
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs at least one correct and one incorrect sample")
    # midranks: tied scores share the mean of their rank positions
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], len(scores)]
    ranks = np.empty(len(scores))
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@torch.no_grad()
def predict(model, inputs, batch_size: int = 4096):
    """Features, logits and probabilities for every input, in evaluation mode."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    feats, logits, probs = [], [], []
    x = torch.as_tensor(np.asarray(inputs), dtype=dtype)
    for start in range(0, len(x), batch_size):
        out = model(x[start : start + batch_size])
        feats.append(out.features)
        logits.append(out.logits)
        probs.append(out.probs)
    model.train(was_training)
    return torch.cat(feats), torch.cat(logits), torch.cat(probs)


def error_rate(model, dataset) -> float:
    _, _, probs = predict(model, dataset.inputs)
    return float(np.mean(probs.argmax(dim=-1).numpy() != dataset.labels))


def per_class_accuracy(pred_classes, true_classes, n_classes: int) -> list[float]:
    pred = np.asarray(pred_classes)
    true = np.asarray(true_classes)
    out = []
    for y in range(n_classes):
        members = true == y
        out.append(float(np.mean(pred[members] == y)) if members.any() else float("nan"))
    return out


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0
