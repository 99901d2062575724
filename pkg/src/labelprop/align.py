"""Smooth distribution alignment of propagated class scores.

Iteratively rescales the unlabelled rows of a score matrix so that the
class distribution of their argmax labels drifts toward a prior, clipping
the per-iteration column ratios close to 1 so the deformation stays
smooth.  Rows are renormalized to valid distributions after every pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

__all__ = [
    "AlignConfig",
    "AlignResult",
    "uniform_prior",
    "empirical_class_distribution",
    "smooth_align",
]


@dataclass
class AlignConfig:
    """Alignment controls: iteration count, ratio clip bounds, row floor."""

    max_iter: int = 10
    clip_lo: float = 0.99
    clip_hi: float = 1.01
    negativity_floor: float = 0.0

    def __post_init__(self) -> None:
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if not (0.0 < self.clip_lo <= 1.0 <= self.clip_hi):
            raise ConfigError("clip bounds must satisfy 0 < clip_lo <= 1 <= clip_hi")


@dataclass
class AlignResult:
    F: np.ndarray
    degenerate_rows: int


def uniform_prior(num_classes: int) -> np.ndarray:
    return np.full(num_classes, 1.0 / num_classes)


def validate_prior(D: np.ndarray, num_classes: int) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    if D.shape != (num_classes,):
        raise InputError(f"prior must have exactly {num_classes} entries")
    if (D < 0).any() or abs(float(D.sum()) - 1.0) > 1e-9:
        raise InputError("prior must be nonnegative and sum to 1")
    return D


def empirical_class_distribution(F: np.ndarray, unlabelled_idx: np.ndarray) -> np.ndarray:
    """Fraction of unlabelled rows whose argmax falls in each class."""
    unlabelled_idx = np.asarray(unlabelled_idx, dtype=np.int64)
    if unlabelled_idx.size == 0:
        raise InputError("unlabelled index set is empty")
    F = np.asarray(F, dtype=np.float64)
    winners = np.argmax(F[unlabelled_idx], axis=1)
    return np.bincount(winners, minlength=F.shape[1]) / unlabelled_idx.size


def _normalize_rows(F: np.ndarray, num_classes: int) -> int:
    """Row-normalize in place; rows with no positive mass become uniform."""
    sums = F.sum(axis=1)
    bad = sums <= 0.0
    good = ~bad
    F[good] /= sums[good, None]
    F[bad] = 1.0 / num_classes
    return int(bad.sum())


def smooth_align(
    F: np.ndarray,
    prior: np.ndarray,
    labelled_idx: np.ndarray,
    unlabelled_idx: np.ndarray,
    cfg: AlignConfig | None = None,
) -> AlignResult:
    """Deform unlabelled rows toward the prior class distribution.

    Runs exactly ``cfg.max_iter`` iterations.  Each iteration measures the
    empirical argmax distribution over the unlabelled rows, forms the ratio
    R = prior / empirical (0/0 -> 1, x/0 -> clip_hi), clips R to the
    configured bounds, scales the unlabelled rows column-wise by R, and
    row-normalizes the whole matrix.  Input rows are clamped at the
    negativity floor and normalized once before the first iteration, so the
    output rows are always valid distributions.  Labelled rows are only
    ever rescaled row-wise, which cannot change their argmax.
    """
    cfg = cfg or AlignConfig()
    F = np.array(F, dtype=np.float64)
    if not np.isfinite(F).all():
        raise InputError("score matrix contains non-finite values")
    num_classes = F.shape[1]
    prior = validate_prior(prior, num_classes)
    unlabelled_idx = np.asarray(unlabelled_idx, dtype=np.int64)
    if unlabelled_idx.size == 0:
        raise InputError("unlabelled index set is empty")

    np.maximum(F, cfg.negativity_floor, out=F)
    degenerate = _normalize_rows(F, num_classes)

    for _ in range(cfg.max_iter):
        empirical = empirical_class_distribution(F, unlabelled_idx)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = prior / empirical
        ratio[empirical == 0.0] = np.where(prior[empirical == 0.0] > 0.0, cfg.clip_hi, 1.0)
        np.clip(ratio, cfg.clip_lo, cfg.clip_hi, out=ratio)
        F[unlabelled_idx] *= ratio
        degenerate += _normalize_rows(F, num_classes)
    return AlignResult(F=F, degenerate_rows=degenerate)
