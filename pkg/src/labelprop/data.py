"""Synthetic datasets, labelled/unlabelled splits, and CIFAR-style binary ingestion.

Class labels are 1-based everywhere; sample indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .graph import LabelSeed

__all__ = [
    "Dataset",
    "SplitSpec",
    "two_moons",
    "gaussian_blobs",
    "blob_images",
    "make_split",
    "train_test_split",
    "read_cifar_binary",
    "write_cifar_binary",
]

CIFAR_RECORD_BYTES = 3073
MOON_CENTERS = ((0.0, 0.0), (1.0, 0.5))


@dataclass
class Dataset:
    """Inputs plus ground-truth labels for one train/test partition.

    ``inputs`` is either (n, d) flat vectors or (n, H, W, C) image buffers
    with values in [0, 1].
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    tag: str = "train"

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise InputError("inputs and labels must have equal length")
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.num_classes):
            raise InputError(f"labels must lie in 1..{self.num_classes}")

    @property
    def n(self) -> int:
        return int(self.labels.size)

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4

    def flat_inputs(self) -> np.ndarray:
        return self.inputs.reshape(self.n, -1)


@dataclass
class SplitSpec:
    """How to pick the labelled subset."""

    n_labelled: int
    seed: int = 0
    stratified: bool = True


def two_moons(n: int, noise_sd: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaving unit half-circles with Gaussian coordinate noise.

    The class-1 moon is the upper arc of the unit circle centered at
    (0, 0); the class-2 moon is the reflected arc centered at (1, 0.5),
    the conventional construction.  Points alternate between classes only
    in index blocks: the first n//2 rows are class 1.
    """
    if n % 2 != 0:
        raise ConfigError("two_moons requires an even n")
    m = n // 2
    t = np.linspace(0.0, np.pi, m)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    X = np.concatenate([upper, lower], axis=0)
    rng = np.random.default_rng(seed)
    if noise_sd > 0:
        X = X + rng.normal(0.0, noise_sd, size=X.shape)
    y = np.concatenate([np.ones(m, dtype=np.int64), np.full(m, 2, dtype=np.int64)])
    return Dataset(inputs=X, labels=y, num_classes=2)


def gaussian_blobs(
    n: int,
    num_classes: int,
    centers: np.ndarray,
    sd: float,
    seed: int = 0,
) -> Dataset:
    """Isotropic Gaussian clusters, n/C points per class (remainder spread)."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape[0] != num_classes:
        raise ConfigError("need one center per class")
    if len(np.unique(centers, axis=0)) != num_classes:
        raise ConfigError("centers must be pairwise distinct")
    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    rng = np.random.default_rng(seed)
    X = np.repeat(centers, counts, axis=0)
    if sd > 0:
        X = X + rng.normal(0.0, sd, size=X.shape)
    y = np.repeat(np.arange(1, num_classes + 1), counts)
    return Dataset(inputs=X, labels=y, num_classes=num_classes)


def _smooth_prototypes(num_classes: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency, left-right symmetric class prototype images in [0.2, 0.8]."""
    coarse = rng.uniform(0.0, 1.0, size=(num_classes, 4, 4))
    # bilinear upsample 4x4 -> side x side
    src = (np.arange(side) + 0.5) * 4.0 / side - 0.5
    src = np.clip(src, 0.0, 3.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, 3)
    frac = src - lo
    rows = coarse[:, lo, :] * (1 - frac)[None, :, None] + coarse[:, hi, :] * frac[None, :, None]
    protos = (
        rows[:, :, lo] * (1 - frac)[None, None, :] + rows[:, :, hi] * frac[None, None, :]
    )
    protos = 0.5 * (protos + protos[:, :, ::-1])  # mirror symmetry: flips stay informative
    return 0.2 + 0.6 * protos


def blob_images(
    n: int,
    num_classes: int,
    side: int = 16,
    noise_sd: float = 0.18,
    seed: int = 0,
    tag: str = "train",
) -> Dataset:
    """Gaussian blobs in pixel space: per-class smooth prototype plus noise.

    Prototypes are horizontally symmetric so flip augmentation preserves
    class identity; smoothness keeps small crops and rotations informative.
    The same seed always yields the same prototypes, so train/test splits
    generated with different ``n`` share class structure only when built
    from one call and partitioned by the caller.
    """
    rng = np.random.default_rng(seed)
    protos = _smooth_prototypes(num_classes, side, rng)
    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    y = np.repeat(np.arange(1, num_classes + 1), counts)
    X = protos[y - 1]
    X = np.clip(X + rng.normal(0.0, noise_sd, size=X.shape), 0.0, 1.0)
    return Dataset(inputs=X[..., None], labels=y, num_classes=num_classes, tag=tag)


def make_split(ds: Dataset, spec: SplitSpec) -> LabelSeed:
    """Choose the labelled subset; stratified splits cover every class."""
    n = ds.n
    if spec.n_labelled > n:
        raise ConfigError("cannot label more samples than the dataset holds")
    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        if spec.n_labelled < ds.num_classes:
            raise ConfigError("stratified split needs at least one label per class")
        picked: list[np.ndarray] = []
        # Largest-remainder allocation of n_labelled across classes.
        class_counts = np.bincount(ds.labels - 1, minlength=ds.num_classes)
        quota = spec.n_labelled * class_counts / n
        base = np.maximum(np.floor(quota).astype(int), 1)
        while base.sum() > spec.n_labelled:
            base[np.argmax(base)] -= 1
        order = np.argsort(-(quota - base))
        for c in order[: spec.n_labelled - base.sum()]:
            base[c] += 1
        for c in range(ds.num_classes):
            idx = np.flatnonzero(ds.labels == c + 1)
            if base[c] > idx.size:
                raise ConfigError(f"class {c + 1} has fewer samples than its quota")
            picked.append(rng.choice(idx, size=base[c], replace=False))
        labelled = np.sort(np.concatenate(picked))
    else:
        labelled = np.sort(rng.choice(n, size=spec.n_labelled, replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[labelled] = True
    unlabelled = np.flatnonzero(~mask)
    return LabelSeed(
        n=n,
        num_classes=ds.num_classes,
        labelled_idx=labelled,
        unlabelled_idx=unlabelled,
        labels=ds.labels[labelled],
    )


def train_test_split(ds: Dataset, n_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified holdout partition of one dataset into train and test parts."""
    if not (0 < n_test < ds.n):
        raise ConfigError("n_test must leave both partitions nonempty")
    holdout_spec = SplitSpec(n_labelled=n_test, seed=seed, stratified=True)
    picked = make_split(ds, holdout_spec)
    test_idx, train_idx = picked.labelled_idx, picked.unlabelled_idx
    train = Dataset(
        inputs=ds.inputs[train_idx], labels=ds.labels[train_idx],
        num_classes=ds.num_classes, tag="train",
    )
    test = Dataset(
        inputs=ds.inputs[test_idx], labels=ds.labels[test_idx],
        num_classes=ds.num_classes, tag="test",
    )
    return train, test


def read_cifar_binary(path: str, num_classes: int = 10) -> Dataset:
    """Read 3073-byte records: 1 label byte then 32x32x3 channel-planar pixels.

    Pixels are scaled to [0, 1]; label bytes are 0-based on disk and become
    1-based classes.  Truncated files and out-of-range label bytes raise a
    format error naming the byte offset.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD_BYTES != 0:
        offset = (raw.size // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
        raise FormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"(file holds {raw.size} bytes, records are {CIFAR_RECORD_BYTES})"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    label_bytes = records[:, 0]
    if label_bytes.size and label_bytes.max() >= num_classes:
        bad = int(np.argmax(label_bytes >= num_classes))
        raise FormatError(
            f"{path}: label byte {int(label_bytes[bad])} at record {bad} "
            f"(byte offset {bad * CIFAR_RECORD_BYTES}) exceeds {num_classes - 1}"
        )
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset(
        inputs=pixels.astype(np.float64) / 255.0,
        labels=label_bytes.astype(np.int64) + 1,
        num_classes=num_classes,
    )


def write_cifar_binary(path: str, ds: Dataset) -> None:
    """Inverse of :func:`read_cifar_binary`, bit-exact on 8-bit data."""
    if not ds.is_image or ds.inputs.shape[1:] != (32, 32, 3):
        raise InputError("CIFAR writer requires 32x32x3 image inputs")
    pixels = np.round(ds.inputs * 255.0).astype(np.uint8).transpose(0, 3, 1, 2)
    records = np.concatenate(
        [(ds.labels - 1).astype(np.uint8)[:, None], pixels.reshape(ds.n, -1)], axis=1
    )
    records.tofile(path)
