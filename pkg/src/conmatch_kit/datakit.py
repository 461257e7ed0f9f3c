"""Datasets, labeled/unlabeled splits, synthetic blobs and batch streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import make_rng

MANIFEST_KEYS = ("name", "count", "classes", "input_shape", "dtype")


class ClassUnderflow(ValueError):
    pass


class EmptyPool(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes, name or self.name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class UnlabeledPool:
    """Inputs seen by training without labels.

    ``eval_labels`` travels with the pool for pseudo-label evaluation only;
    batch streams never read it.
    """

    inputs: np.ndarray
    n_classes: int
    eval_labels: np.ndarray | None = field(default=None, repr=False)
    name: str = "unlabeled"

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True)
class SplitSpec:
    n_labels_per_class: int
    seed: int = 0
    include_labeled_in_unlabeled: bool = True

    def validate(self, dataset: Dataset) -> None:
        if self.n_labels_per_class < 1:
            raise ValueError("n_labels_per_class must be positive")
        # a too-large request always shows up as a per-class shortfall
        counts = dataset.class_counts()
        short = [y for y in range(dataset.n_classes) if counts[y] < self.n_labels_per_class]
        if short:
            raise ClassUnderflow(
                f"classes {short} have fewer than {self.n_labels_per_class} samples "
                f"(counts {counts[short].tolist()})"
            )


def split_labeled(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, UnlabeledPool]:
    """Draw ``n_labels_per_class`` samples per class; the rest stays unlabeled.

    Returns the labeled subset (its ``source_index`` attribute holds the
    picked indices) and the unlabeled pool. By default the pool is the full
    dataset, labeled samples included.
    """
    spec.validate(dataset)
    rng = make_rng(spec.seed, "split")
    picked = []
    for y in range(dataset.n_classes):
        members = np.flatnonzero(dataset.labels == y)
        picked.append(np.sort(rng.choice(members, spec.n_labels_per_class, replace=False)))
    idx = np.concatenate(picked)
    labeled = dataset.subset(idx, name=f"{dataset.name}-labeled")
    labeled.source_index = idx

    if spec.include_labeled_in_unlabeled:
        pool_idx = np.arange(len(dataset))
    else:
        pool_idx = np.setdiff1d(np.arange(len(dataset)), idx)
    pool = UnlabeledPool(
        dataset.inputs[pool_idx],
        dataset.n_classes,
        eval_labels=dataset.labels[pool_idx],
        name=f"{dataset.name}-unlabeled",
    )
    return labeled, pool


def class_means(n_classes: int, input_dim: int, class_separation: float) -> np.ndarray:
    """Equidistant class centres with pairwise distance ``class_separation``.

    Uses the regular simplex when ``input_dim >= n_classes - 1`` and evenly
    spaced points on a circle otherwise (pairwise distance then at least the
    separation, with equality for neighbours).
    """
    if input_dim >= n_classes - 1 and n_classes > 1:
        # centred standard basis vectors in R^Y have pairwise distance sqrt(2)
        basis = np.eye(n_classes) - 1.0 / n_classes
        # orthonormal coordinates inside the (Y-1)-dim hyperplane
        u, s, _ = np.linalg.svd(basis.T, full_matrices=False)
        coords = basis @ u[:, : n_classes - 1]
        means = np.zeros((n_classes, input_dim))
        means[:, : n_classes - 1] = coords * (class_separation / np.sqrt(2.0))
        return means
    if input_dim < 2:
        means = np.zeros((n_classes, input_dim))
        means[:, 0] = np.arange(n_classes) * class_separation
        return means - means.mean(axis=0)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    radius = class_separation / (2 * np.sin(np.pi / n_classes))
    means = np.zeros((n_classes, input_dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def _placed_means(rng, n_classes: int, input_dim: int, class_separation: float, rotate: bool) -> np.ndarray:
    means = class_means(n_classes, input_dim, class_separation)
    if rotate and input_dim > 1:
        q, r = np.linalg.qr(rng.standard_normal((input_dim, input_dim)))
        means = means @ (q * np.sign(np.diag(r))).T
    return means


def synthetic_means(n_classes: int, input_dim: int, class_separation: float, seed: int, rotate: bool = True) -> np.ndarray:
    """The class means ``make_synthetic`` uses for the same arguments."""
    return _placed_means(make_rng(seed, "synthetic"), n_classes, input_dim, class_separation, rotate)


def make_synthetic(
    n_classes: int,
    n_per_class: int,
    input_dim: int,
    class_separation: float,
    noise_sigma: float,
    seed: int,
    name: str = "blobs",
    rotate: bool = True,
) -> Dataset:
    """Isotropic Gaussian blobs around equidistant class means.

    With ``rotate`` the means get a seeded random orthogonal rotation, spreading
    class information over every coordinate (distances are unchanged).
    """
    if min(n_classes, n_per_class, input_dim) < 1:
        raise ValueError("n_classes, n_per_class and input_dim must be positive")
    if class_separation <= 0:
        raise ValueError("class_separation must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = make_rng(seed, "synthetic")
    means = _placed_means(rng, n_classes, input_dim, class_separation, rotate)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    noise = rng.standard_normal((len(labels), input_dim)) * noise_sigma
    inputs = means[labels] + noise
    return Dataset(inputs, labels, n_classes, name)


def stratified_holdout(dataset: Dataset, n_per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Split off ``n_per_class`` samples of every class as a held-out set."""
    rng = make_rng(seed, "holdout")
    held = []
    for y in range(dataset.n_classes):
        members = np.flatnonzero(dataset.labels == y)
        if len(members) < n_per_class:
            raise ClassUnderflow(f"class {y} has {len(members)} samples, need {n_per_class}")
        held.append(rng.choice(members, n_per_class, replace=False))
    held = np.sort(np.concatenate(held))
    rest = np.setdiff1d(np.arange(len(dataset)), held)
    return dataset.subset(rest, f"{dataset.name}-train"), dataset.subset(held, f"{dataset.name}-test")


@dataclass
class BatchPair:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_index: np.ndarray
    labeled_index: np.ndarray


class IndexStream:
    """Infinite stream of indices: concatenated seeded permutations of ``range(n)``.

    Position ``k`` of the stream is a pure function of (seed, stream, k), so a
    stream can be resumed at any batch without replaying earlier ones.
    """

    def __init__(self, n: int, seed: int, stream: str):
        if n < 1:
            raise EmptyPool(f"{stream} pool is empty")
        self.n = n
        self.seed = seed
        self.stream = stream
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        perm = self._perms.get(epoch)
        if perm is None:
            perm = make_rng(self.seed, self.stream, epoch).permutation(self.n)
            if len(self._perms) > 8:
                self._perms.clear()
            self._perms[epoch] = perm
        return perm

    def take(self, start: int, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        filled = 0
        pos = start
        while filled < count:
            epoch, offset = divmod(pos, self.n)
            chunk = self._perm(epoch)[offset : offset + (count - filled)]
            out[filled : filled + len(chunk)] = chunk
            filled += len(chunk)
            pos += len(chunk)
        return out


class BatchIterator:
    """Yields ``BatchPair`` with B labeled and ``mu * B`` unlabeled items.

    ``position`` counts delivered batches; set it to resume a stream.
    """

    def __init__(self, labeled: Dataset, unlabeled: UnlabeledPool, B: int, mu: int, seed: int, position: int = 0):
        if len(labeled) == 0 or len(unlabeled) == 0:
            raise EmptyPool("labeled and unlabeled pools must be non-empty")
        if B < 1 or mu < 1:
            raise ValueError("B and mu must be positive")
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.B = B
        self.mu = mu
        self.position = position
        self._lab = IndexStream(len(labeled), seed, "labeled-batches")
        self._unl = IndexStream(len(unlabeled), seed, "unlabeled-batches")

    def batch(self, k: int) -> BatchPair:
        li = self._lab.take(k * self.B, self.B)
        ui = self._unl.take(k * self.B * self.mu, self.B * self.mu)
        return BatchPair(
            labeled_x=self.labeled.inputs[li],
            labeled_y=self.labeled.labels[li],
            unlabeled_x=self.unlabeled.inputs[ui],
            unlabeled_index=ui,
            labeled_index=li,
        )

    def __iter__(self) -> Iterator[BatchPair]:
        return self

    def __next__(self) -> BatchPair:
        out = self.batch(self.position)
        self.position += 1
        return out


def batch_iter(labeled: Dataset, unlabeled: UnlabeledPool, B: int, mu: int, seed: int) -> BatchIterator:
    # batch sizes larger than a pool are served by wraparound
    return BatchIterator(labeled, unlabeled, B, mu, seed)


# --- on-disk format -----------------------------------------------------------


def save_dataset(dataset: Dataset, prefix: str | Path) -> Path:
    """Write ``<prefix>.manifest``, ``<prefix>.inputs.f32`` and ``<prefix>.labels.u32``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    inputs = np.ascontiguousarray(dataset.inputs, dtype="<f4")
    labels = np.ascontiguousarray(dataset.labels, dtype="<u4")
    inputs.tofile(f"{prefix}.inputs.f32")
    labels.tofile(f"{prefix}.labels.u32")
    manifest = Path(f"{prefix}.manifest")
    shape = "x".join(str(s) for s in dataset.input_shape)
    manifest.write_text(
        f"name={dataset.name}\ncount={len(dataset)}\nclasses={dataset.n_classes}\n"
        f"input_shape={shape}\ndtype=float32\n"
    )
    return manifest


def read_manifest(path: str | Path) -> dict[str, str]:
    entries = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ManifestError(f"{path}: malformed line {line!r}")
        entries[key.strip()] = value.strip()
    missing = [k for k in MANIFEST_KEYS if k not in entries]
    if missing:
        raise ManifestError(f"{path}: missing keys {missing}")
    return entries


def load_dataset(manifest_path: str | Path) -> Dataset:
    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)
    if entries["dtype"] != "float32":
        raise ManifestError(f"unsupported dtype {entries['dtype']!r}")
    count = int(entries["count"])
    shape = tuple(int(s) for s in entries["input_shape"].split("x") if s)
    prefix = str(manifest_path)[: -len(".manifest")] if manifest_path.suffix == ".manifest" else str(manifest_path)
    inputs = np.fromfile(f"{prefix}.inputs.f32", dtype="<f4")
    labels = np.fromfile(f"{prefix}.labels.u32", dtype="<u4")
    per_item = int(np.prod(shape)) if shape else 1
    if inputs.size != count * per_item:
        raise ManifestError(f"inputs hold {inputs.size} values, manifest expects {count * per_item}")
    if labels.size != count:
        raise ManifestError(f"labels hold {labels.size} values, manifest expects {count}")
    return Dataset(
        inputs.reshape((count,) + shape).astype(np.float64),
        labels.astype(np.int64),
        int(entries["classes"]),
        entries["name"],
    )
