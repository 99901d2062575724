"""Sparse kNN affinity graphs and Laplacian-regularized label propagation.

The pipeline implemented here builds a symmetric sparse affinity matrix W
from an embedding matrix, normalizes it to A = D^(-1/2) W D^(-1/2), and
spreads seed labels by solving the damped linear system

    (I - gamma * A) F = Y,   gamma = 1 / (1 + mu),

one conjugate-gradient solve per class column.  Pseudo-labels are the
row-wise argmax of F.  Classes are 1-based throughout the public API;
sample indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from .errors import ConfigError, InconsistencyError, InputError

__all__ = [
    "SparseAffinity",
    "LabelSeed",
    "PropagationConfig",
    "PropagationResult",
    "build_knn_affinity",
    "normalize_affinity",
    "build_label_matrix",
    "solve_propagation",
    "laplacian_cost",
    "extract_pseudo_labels",
]


@dataclass
class SparseAffinity:
    """Symmetric nonnegative affinity matrix in compressed sparse row form.

    Entries selected by the kNN rule are stored explicitly even when their
    clamped weight is zero, so structural symmetry is preserved exactly.
    ``degrees`` holds the pre-normalization row sums of W and is populated
    by :func:`normalize_affinity`; the Laplacian cost needs it to recover W
    from the normalized values.
    """

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    normalized: bool = False
    degrees: np.ndarray | None = None
    degree_epsilon: float = 0.0

    def to_scipy(self) -> sparse.csr_matrix:
        return sparse.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=(self.n, self.n)
        )

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    @property
    def nnz(self) -> int:
        return int(self.col_indices.size)


@dataclass
class LabelSeed:
    """Seed labelling: which samples carry a known class.

    ``labels[i]`` is the 1-based class of ``labelled_idx[i]``.
    """

    n: int
    num_classes: int
    labelled_idx: np.ndarray
    unlabelled_idx: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.labelled_idx = np.asarray(self.labelled_idx, dtype=np.int64)
        self.unlabelled_idx = np.asarray(self.unlabelled_idx, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labelled_idx.shape != self.labels.shape:
            raise InputError("labelled_idx and labels must have equal length")
        merged = np.concatenate([self.labelled_idx, self.unlabelled_idx])
        if merged.size != self.n or np.unique(merged).size != self.n:
            raise InputError("labelled and unlabelled indices must partition 0..n-1")
        if self.labels.size and (
            self.labels.min() < 1 or self.labels.max() > self.num_classes
        ):
            raise InputError(f"labels must lie in 1..{self.num_classes}")


@dataclass
class PropagationConfig:
    """Solver settings for label propagation.

    ``gamma`` is derived from ``mu`` so that gamma * (1 + mu) = 1 holds
    exactly by construction.
    """

    k: int = 50
    mu: float = 0.01
    cg_tol: float = 1e-6
    cg_max_iter: int = 1000
    degree_epsilon: float = 1e-12

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.mu <= 0:
            raise ConfigError("mu must be positive")
        if self.cg_tol <= 0:
            raise ConfigError("cg_tol must be positive")

    @property
    def gamma(self) -> float:
        return 1.0 / (1.0 + self.mu)


@dataclass
class PropagationResult:
    """Per-column conjugate-gradient outcome alongside the score matrix F."""

    F: np.ndarray
    iterations: np.ndarray
    residuals: np.ndarray
    converged: np.ndarray

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all())


def _validate_embeddings(V: np.ndarray) -> np.ndarray:
    V = np.ascontiguousarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 2:
        raise InputError("embeddings must be a 2-D array with at least 2 rows")
    if not np.isfinite(V).all():
        raise InputError("embeddings contain non-finite values")
    return V


def build_knn_affinity(V: np.ndarray, k: int, block_size: int = 2048) -> SparseAffinity:
    """Build the symmetric kNN affinity graph over embedding rows.

    Neighbor search is exact brute force: each row's k nearest neighbors
    under Euclidean distance (self excluded), evaluated in row blocks to
    bound memory.  For unit-norm rows this ranking coincides with picking
    the k largest inner products.  An undirected edge (i, j) is stored when
    i is among j's neighbors or vice versa, with weight
    max(<v_i, v_j>, 0); entries whose similarity clamps to zero are kept
    as explicit structural zeros.
    """
    V = _validate_embeddings(V)
    n = V.shape[0]
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than the number of samples n={n}")

    sq_norms = np.einsum("ij,ij->i", V, V)
    neighbor_cols = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        inner = V[start:stop] @ V.T
        d2 = sq_norms[start:stop, None] - 2.0 * inner + sq_norms[None, :]
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        order = np.argsort(np.take_along_axis(d2, part, axis=1), axis=1)
        neighbor_cols[start:stop] = np.take_along_axis(part, order, axis=1)

    rows = np.repeat(np.arange(n, dtype=np.int64), k)
    cols = neighbor_cols.reshape(-1)
    # Union symmetrization: duplicate each directed selection, dedupe pairs.
    all_rows = np.concatenate([rows, cols])
    all_cols = np.concatenate([cols, rows])
    keys = all_rows * n + all_cols
    uniq = np.unique(keys)
    out_rows = uniq // n
    out_cols = uniq % n
    weights = np.maximum(np.einsum("ij,ij->i", V[out_rows], V[out_cols]), 0.0)

    counts = np.bincount(out_rows, minlength=n)
    row_offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=row_offsets[1:])
    return SparseAffinity(
        n=n,
        row_offsets=row_offsets,
        col_indices=out_cols,
        values=weights,
    )


def normalize_affinity(W: SparseAffinity, degree_epsilon: float = 1e-12) -> SparseAffinity:
    """Symmetric degree normalization A_ij = W_ij / sqrt((D_i+eps)(D_j+eps)).

    The epsilon floor keeps rows of isolated nodes at exactly zero instead
    of producing non-finite values.  Pre-normalization degrees are retained
    on the result for later cost evaluation.
    """
    if W.normalized:
        raise InputError("affinity is already normalized")
    if (W.values < 0).any():
        raise InputError("affinity weights must be nonnegative")
    n = W.n
    row_ids = np.repeat(np.arange(n, dtype=np.int64), np.diff(W.row_offsets))
    degrees = np.bincount(row_ids, weights=W.values, minlength=n)
    inv_sqrt = 1.0 / np.sqrt(degrees + degree_epsilon)
    new_values = W.values * inv_sqrt[row_ids] * inv_sqrt[W.col_indices]
    return SparseAffinity(
        n=n,
        row_offsets=W.row_offsets.copy(),
        col_indices=W.col_indices.copy(),
        values=new_values,
        normalized=True,
        degrees=degrees,
        degree_epsilon=degree_epsilon,
    )


def build_label_matrix(seed: LabelSeed) -> np.ndarray:
    """One-hot seed matrix Y: row i has a 1 in its class column when labelled."""
    Y = np.zeros((seed.n, seed.num_classes))
    Y[seed.labelled_idx, seed.labels - 1] = 1.0
    return Y


def solve_propagation(
    A: SparseAffinity, Y: np.ndarray, cfg: PropagationConfig
) -> PropagationResult:
    """Solve (I - gamma * A) F = Y column by column with conjugate gradient.

    Each class column starts from its seed column and stops when the
    relative residual ||r|| / max(||Y_c||, eps_machine) drops below
    ``cfg.cg_tol`` or the iteration cap is hit; hitting the cap is reported
    per column rather than raised.  All-zero seed columns short-circuit to
    all-zero score columns.
    """
    if not A.normalized:
        raise InputError("solve_propagation requires a normalized affinity")
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != A.n:
        raise InputError("Y must be n x C")
    gamma = cfg.gamma
    M = A.to_scipy()
    n, C = Y.shape
    F = np.zeros_like(Y)
    iterations = np.zeros(C, dtype=np.int64)
    residuals = np.zeros(C)
    converged = np.ones(C, dtype=bool)

    def matvec(x: np.ndarray) -> np.ndarray:
        return x - gamma * (M @ x)

    eps_machine = np.finfo(np.float64).eps
    for c in range(C):
        b = Y[:, c]
        b_norm = float(np.linalg.norm(b))
        if b_norm == 0.0:
            continue
        threshold = cfg.cg_tol * max(b_norm, eps_machine)
        x = b.copy()
        r = b - matvec(x)
        p = r.copy()
        rs_old = float(r @ r)
        it = 0
        while np.sqrt(rs_old) > threshold and it < cfg.cg_max_iter:
            Ap = matvec(p)
            alpha = rs_old / float(p @ Ap)
            x += alpha * p
            r -= alpha * Ap
            rs_new = float(r @ r)
            p = r + (rs_new / rs_old) * p
            rs_old = rs_new
            it += 1
        F[:, c] = x
        iterations[c] = it
        residuals[c] = np.sqrt(rs_old) / max(b_norm, eps_machine)
        converged[c] = np.sqrt(rs_old) <= threshold
    return PropagationResult(F=F, iterations=iterations, residuals=residuals, converged=converged)


def laplacian_cost(A: SparseAffinity, F: np.ndarray, Y: np.ndarray, mu: float) -> float:
    """Smoothness-plus-fidelity energy of a score matrix.

    Computes, by direct summation over stored edges,

        0.5 * sum_ij W_ij || F_i / sqrt(D_i) - F_j / sqrt(D_j) ||^2
        + (mu / 2) * sum_i || F_i - Y_i ||^2,

    where W is recovered from the normalized values and retained degrees.
    Zero-weight edges and isolated nodes contribute nothing.
    """
    if not A.normalized or A.degrees is None:
        raise InputError("laplacian_cost requires a normalized affinity with degrees")
    F = np.asarray(F, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if F.shape != Y.shape or F.shape[0] != A.n:
        raise InputError("F and Y must both be n x C")

    D = A.degrees
    eps = A.degree_epsilon
    row_ids = np.repeat(np.arange(A.n, dtype=np.int64), np.diff(A.row_offsets))
    col_ids = A.col_indices
    scale = np.sqrt((D[row_ids] + eps) * (D[col_ids] + eps))
    W_vals = A.values * scale

    live = W_vals > 0.0
    if np.any(live & ((D[row_ids] == 0) | (D[col_ids] == 0))):
        raise InconsistencyError("zero-degree node has a nonzero incident weight")

    smooth = 0.0
    if live.any():
        G = np.zeros_like(F)
        pos = D > 0
        G[pos] = F[pos] / np.sqrt(D[pos])[:, None]
        diff = G[row_ids[live]] - G[col_ids[live]]
        smooth = 0.5 * float(np.sum(W_vals[live] * np.einsum("ij,ij->i", diff, diff)))
    fidelity = 0.5 * mu * float(np.sum((F - Y) ** 2))
    return smooth + fidelity


def extract_pseudo_labels(F: np.ndarray, seed: LabelSeed) -> tuple[np.ndarray, int]:
    """Argmax labels per row; labelled rows keep their ground truth.

    Ties break toward the lowest class index.  All-zero rows are assigned
    class 1 and counted; the count is returned alongside the labels.
    """
    F = np.asarray(F, dtype=np.float64)
    if not np.isfinite(F).all():
        raise InputError("score matrix contains non-finite values")
    if F.shape[0] != seed.n:
        raise InputError("score matrix row count does not match the seed")
    labels = np.argmax(F, axis=1).astype(np.int64) + 1
    degenerate = int(np.sum(~F.any(axis=1)))
    labels[~F.any(axis=1)] = 1
    labels[seed.labelled_idx] = seed.labels
    return labels, degenerate
