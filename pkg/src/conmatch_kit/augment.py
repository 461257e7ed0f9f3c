"""Weak and strong stochastic augmentation for image tensors and feature vectors.

Images are float arrays of shape (H, W, C) with values in [0, 1]; vectors are
1-D arrays. Batch helpers accept a leading sample axis. Every function draws
randomness only from the ``numpy.random.Generator`` it is given.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage


class UnknownOp(KeyError):
    pass


# --- image ops ------------------------------------------------------------------
# Each op maps (image, magnitude in [0, 1], rng) -> image; magnitude 0 is identity.


def _sign(rng) -> float:
    return 1.0 if rng.random() < 0.5 else -1.0


def shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by whole pixels, filling the exposed border by reflection."""
    if dy == 0 and dx == 0:
        return img.copy()
    h, w = img.shape[:2]
    py, px = abs(dy), abs(dx)
    padded = np.pad(img, ((py, py), (px, px), (0, 0)), mode="reflect")
    return padded[py - dy : py - dy + h, px - dx : px - dx + w].copy()


def _brightness(img, m, rng):
    return np.clip(img * (1.0 + _sign(rng) * 0.9 * m), 0.0, 1.0)


def _contrast(img, m, rng):
    mean = img.mean()
    return np.clip(mean + (img - mean) * (1.0 + _sign(rng) * 0.9 * m), 0.0, 1.0)


def _solarize(img, m, rng):
    threshold = 1.0 - m
    return np.where(img > threshold, 1.0 - img, img)


def _posterize(img, m, rng):
    bits = 8 - int(round(4 * m))
    if bits >= 8:
        return img.copy()
    levels = 2**bits
    return np.floor(img * levels) / levels


def _autocontrast(img, m, rng):
    lo = img.min(axis=(0, 1), keepdims=True)
    hi = img.max(axis=(0, 1), keepdims=True)
    stretched = np.where(hi > lo, (img - lo) / np.where(hi > lo, hi - lo, 1.0), img)
    return img + m * (stretched - img)


def _invert(img, m, rng):
    return img + m * (1.0 - 2.0 * img)


def _sharpness(img, m, rng):
    blurred = ndimage.uniform_filter(img, size=(3, 3, 1), mode="reflect")
    return np.clip(img + _sign(rng) * m * (img - blurred), 0.0, 1.0)


def _translate_x(img, m, rng):
    return shift(img, 0, int(round(_sign(rng) * 0.3 * m * img.shape[1])))


def _translate_y(img, m, rng):
    return shift(img, int(round(_sign(rng) * 0.3 * m * img.shape[0])), 0)


def _rotate(img, m, rng):
    return ndimage.rotate(img, _sign(rng) * 30.0 * m, axes=(0, 1), reshape=False, order=1, mode="reflect")


def _shear(axis):
    def op(img, m, rng):
        s = _sign(rng) * 0.3 * m
        h, w = img.shape[:2]
        matrix = np.eye(3)
        if axis == "x":
            matrix[1, 0] = s
            offset = np.array([0.0, -s * h / 2, 0.0])
        else:
            matrix[0, 1] = s
            offset = np.array([-s * w / 2, 0.0, 0.0])
        return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="reflect")

    return op


IMAGE_OPS = {
    "brightness": _brightness,
    "contrast": _contrast,
    "solarize": _solarize,
    "posterize": _posterize,
    "autocontrast": _autocontrast,
    "invert": _invert,
    "sharpness": _sharpness,
    "translate_x": _translate_x,
    "translate_y": _translate_y,
    "rotate": _rotate,
    "shear_x": _shear("x"),
    "shear_y": _shear("y"),
}

DEFAULT_STRONG_OPS = tuple((name, (0.0, 1.0)) for name in IMAGE_OPS)


def cutout(img: np.ndarray, size_frac: float, rng, fill: float = 0.5) -> np.ndarray:
    if size_frac <= 0:
        return img
    h, w = img.shape[:2]
    side = max(1, int(round(size_frac * min(h, w))))
    cy, cx = rng.integers(0, h), rng.integers(0, w)
    y0, y1 = max(0, cy - side // 2), min(h, cy + side - side // 2)
    x0, x1 = max(0, cx - side // 2), min(w, cx + side - side // 2)
    out = img.copy()
    out[y0:y1, x0:x1] = fill
    return out


# --- policies -------------------------------------------------------------------


@dataclass(frozen=True)
class AugPolicy:
    """Parameters of one augmentation branch.

    Image fields: ``flip_prob``/``max_shift`` (weak), ``ops``/``n_ops_per_call``/
    ``cutout`` (strong). Vector fields: ``sigma`` is the additive noise std
    (scalar or per-feature), ``p_mask`` and ``scale_range`` apply to strong only.
    """

    kind: str = "weak"
    ops: tuple = ()
    n_ops_per_call: int = 2
    rng_stream_id: int = 0
    flip_prob: float = 0.5
    max_shift: float = 0.125
    cutout: float = 0.5
    sigma: float | np.ndarray = 0.05
    p_mask: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ValueError(f"kind must be 'weak' or 'strong', got {self.kind!r}")
        if self.kind == "weak" and self.ops:
            raise ValueError("weak policy admits only flip and shift")
        if self.kind == "strong" and self.n_ops_per_call < 1:
            raise ValueError("strong policy must draw at least one op per call")
        if not 0.0 <= self.p_mask <= 1.0:
            raise ValueError("p_mask must lie in [0, 1]")


def weak_policy(feature_std=1.0, sigma_rel: float = 0.05, **kw) -> AugPolicy:
    return AugPolicy(kind="weak", sigma=sigma_rel * np.asarray(feature_std, dtype=float), **kw)


def strong_policy(
    feature_std=1.0,
    sigma_rel: float = 0.25,
    p_mask: float = 0.3,
    scale_range: tuple[float, float] = (0.8, 1.2),
    ops=DEFAULT_STRONG_OPS,
    **kw,
) -> AugPolicy:
    return AugPolicy(
        kind="strong",
        ops=tuple((name, tuple(r)) for name, r in ops),
        sigma=sigma_rel * np.asarray(feature_std, dtype=float),
        p_mask=p_mask,
        scale_range=tuple(scale_range),
        **kw,
    )


def _check_ops(policy: AugPolicy) -> None:
    for name, _ in policy.ops:
        if name not in IMAGE_OPS:
            raise UnknownOp(name)


# --- single-sample entry points -------------------------------------------------


def weak_augment(x: np.ndarray, rng: np.random.Generator, policy: AugPolicy | None = None) -> np.ndarray:
    policy = policy or AugPolicy(kind="weak")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x + rng.standard_normal(x.shape) * policy.sigma
    if x.ndim != 3:
        raise ValueError(f"expected a vector or an HxWxC image, got shape {x.shape}")
    out = x[:, ::-1].copy() if rng.random() < policy.flip_prob else x.copy()
    h, w = x.shape[:2]
    my, mx = int(round(policy.max_shift * h)), int(round(policy.max_shift * w))
    dy = int(rng.integers(-my, my + 1)) if my else 0
    dx = int(rng.integers(-mx, mx + 1)) if mx else 0
    return shift(out, dy, dx)


def strong_augment(x: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    if policy.kind != "strong":
        raise ValueError("strong_augment needs a strong policy")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return _strong_vectors(x[None], policy, rng)[0]
    if x.ndim != 3:
        raise ValueError(f"expected a vector or an HxWxC image, got shape {x.shape}")
    _check_ops(policy)
    out = x
    if policy.ops:
        picks = rng.integers(0, len(policy.ops), size=policy.n_ops_per_call)
        for k in picks:
            name, (lo, hi) = policy.ops[k]
            m = rng.uniform(lo, hi) if hi > lo else lo
            out = out if m == 0 else IMAGE_OPS[name](out, m, rng)
    return cutout(out, policy.cutout, rng)


def _strong_vectors(X: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    out = X + rng.standard_normal(X.shape) * policy.sigma
    if policy.p_mask > 0:
        out = np.where(rng.random(X.shape) < policy.p_mask, 0.0, out)
    lo, hi = policy.scale_range
    if hi > lo:
        out = out * rng.uniform(lo, hi, size=(len(X),) + (1,) * (X.ndim - 1))
    elif lo != 1.0:
        out = out * lo
    return out


# --- batches ---------------------------------------------------------------------


def augment_batch(X: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    """Augment every sample of ``X``; vectors are processed in one vectorised draw."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        if policy.kind == "weak":
            return X + rng.standard_normal(X.shape) * policy.sigma
        return _strong_vectors(X, policy, rng)
    fn = weak_augment if policy.kind == "weak" else (lambda x, r, p: strong_augment(x, p, r))
    return np.stack([fn(x, rng, policy) for x in X])


def with_stream(policy: AugPolicy, stream_id: int) -> AugPolicy:
    return replace(policy, rng_stream_id=stream_id)
