"""Graph construction and propagation tests.

Every derived expectation here is computed by an independent oracle:
dense brute-force neighbor masks, dense linear solves, and naive
double-loop cost summation.  The oracles never call into the code paths
they check.
"""

import numpy as np
import pytest

from labelprop.errors import ConfigError, InconsistencyError, InputError
from labelprop.graph import (
    LabelSeed,
    PropagationConfig,
    build_knn_affinity,
    build_label_matrix,
    extract_pseudo_labels,
    laplacian_cost,
    normalize_affinity,
    solve_propagation,
)


# ----------------------------------------------------------------------
# Oracles
# ----------------------------------------------------------------------

def dense_knn_oracle(V, k):
    """O(n^2) reference: nearest-by-distance selection, union rule,
    clamped inner-product weights."""
    n = V.shape[0]
    d2 = ((V[:, None, :] - V[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    selected = np.zeros((n, n), dtype=bool)
    for i in range(n):
        selected[i, np.argsort(d2[i])[:k]] = True
    mask = selected | selected.T
    W = np.where(mask, np.maximum(V @ V.T, 0.0), 0.0)
    np.fill_diagonal(W, 0.0)
    return W, mask


def dense_solve_oracle(A_dense, Y, gamma):
    return np.linalg.solve(np.eye(A_dense.shape[0]) - gamma * A_dense, Y)


def naive_cost_oracle(W_dense, F, Y, mu):
    """Literal double-loop evaluation of the smoothness + fidelity energy."""
    n = W_dense.shape[0]
    D = W_dense.sum(axis=1)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if W_dense[i, j] > 0:
                diff = F[i] / np.sqrt(D[i]) - F[j] / np.sqrt(D[j])
                total += 0.5 * W_dense[i, j] * float(diff @ diff)
    for i in range(n):
        total += 0.5 * mu * float((F[i] - Y[i]) @ (F[i] - Y[i]))
    return total


def random_affinity(rng, n, k=6):
    V = rng.normal(size=(n, 5))
    return build_knn_affinity(V, k)


def make_seed(n, num_classes, labelled, labels):
    labelled = np.asarray(labelled, dtype=np.int64)
    mask = np.zeros(n, dtype=bool)
    mask[labelled] = True
    return LabelSeed(
        n=n,
        num_classes=num_classes,
        labelled_idx=labelled,
        unlabelled_idx=np.flatnonzero(~mask),
        labels=np.asarray(labels),
    )


# ----------------------------------------------------------------------
# build_knn_affinity
# ----------------------------------------------------------------------

class TestBuildKnnAffinity:
    def test_two_identical_unit_vectors(self):
        """Self is excluded, so twins link with weight <v, v> = 1."""
        v = np.array([[1.0, 0.0], [1.0, 0.0]])
        W = build_knn_affinity(v, 1).to_dense()
        np.testing.assert_array_equal(W, [[0.0, 1.0], [1.0, 0.0]])

    def test_orthogonal_vectors_store_explicit_zero(self):
        W = build_knn_affinity(np.eye(2), 1)
        assert W.nnz == 2  # both directions present despite zero weight
        np.testing.assert_array_equal(W.to_dense(), np.zeros((2, 2)))

    def test_matches_dense_oracle_on_random_unit_vectors(self):
        rng = np.random.default_rng(7)
        V = rng.normal(size=(5, 3))
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        expected, mask = dense_knn_oracle(V, 2)
        got = build_knn_affinity(V, 2)
        np.testing.assert_allclose(got.to_dense(), expected, atol=1e-12)
        assert got.nnz == mask.sum()

    def test_k_not_smaller_than_n_rejected(self):
        with pytest.raises(ConfigError):
            build_knn_affinity(np.eye(3), 3)

    def test_non_finite_input_rejected(self):
        V = np.ones((4, 2))
        V[2, 1] = np.nan
        with pytest.raises(InputError):
            build_knn_affinity(V, 1)

    def test_zero_diagonal(self):
        rng = np.random.default_rng(3)
        W = random_affinity(rng, 40).to_dense()
        np.testing.assert_array_equal(np.diag(W), np.zeros(40))

    def test_structural_symmetry_exact(self):
        """Stored entries mirror exactly, including explicit zeros."""
        rng = np.random.default_rng(11)
        for trial in range(5):
            aff = random_affinity(rng, 60)
            M = aff.to_scipy()
            assert (M != M.T).nnz == 0
            pattern = M.copy()
            pattern.data = np.ones_like(pattern.data)
            assert (pattern != pattern.T).nnz == 0

    def test_total_edge_budget(self):
        """Union symmetrization stores at most 2*k*n directed entries."""
        rng = np.random.default_rng(5)
        for n, k in [(50, 3), (80, 10)]:
            aff = build_knn_affinity(rng.normal(size=(n, 4)), k)
            assert aff.nnz <= 2 * k * n

    def test_blocked_evaluation_matches_unblocked(self):
        rng = np.random.default_rng(13)
        V = rng.normal(size=(70, 6))
        a = build_knn_affinity(V, 5, block_size=7)
        b = build_knn_affinity(V, 5)
        np.testing.assert_array_equal(a.to_dense(), b.to_dense())


# ----------------------------------------------------------------------
# normalize_affinity
# ----------------------------------------------------------------------

class TestNormalizeAffinity:
    def test_two_node_graph_unchanged(self):
        """Unit degrees leave the single edge at weight 1."""
        W = build_knn_affinity(np.array([[1.0, 0.0], [1.0, 0.0]]), 1)
        A = normalize_affinity(W, degree_epsilon=0.0)
        np.testing.assert_allclose(A.to_dense(), [[0.0, 1.0], [1.0, 0.0]])
        assert A.normalized

    def test_three_node_path_hand_computed(self):
        """Unit-weight path: degrees (1, 2, 1) give off-path entries 1/sqrt(2)."""
        import scipy.sparse as sparse

        dense = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
        csr = sparse.csr_matrix(dense)
        from labelprop.graph import SparseAffinity

        W = SparseAffinity(
            n=3, row_offsets=csr.indptr, col_indices=csr.indices, values=csr.data
        )
        A = normalize_affinity(W, degree_epsilon=0.0).to_dense()
        expected = np.array(
            [[0.0, 1 / np.sqrt(2), 0.0], [1 / np.sqrt(2), 0.0, 1 / np.sqrt(2)], [0.0, 1 / np.sqrt(2), 0.0]]
        )
        np.testing.assert_allclose(A, expected, atol=1e-15)

    def test_isolated_node_stays_finite(self):
        """A zero row survives the epsilon floor with all entries zero."""
        import scipy.sparse as sparse

        from labelprop.graph import SparseAffinity

        dense = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        csr = sparse.csr_matrix(dense)
        W = SparseAffinity(n=3, row_offsets=csr.indptr, col_indices=csr.indices, values=csr.data)
        A = normalize_affinity(W, degree_epsilon=1e-12)
        out = A.to_dense()
        assert np.isfinite(out).all()
        np.testing.assert_array_equal(out[2], np.zeros(3))
        np.testing.assert_array_equal(out[:, 2], np.zeros(3))

    def test_spectral_radius_at_most_one(self):
        """With no isolated nodes and eps=0 the normalized matrix has
        eigenvalues in [-1, 1]."""
        rng = np.random.default_rng(21)
        for trial in range(5):
            A = normalize_affinity(random_affinity(rng, 40), degree_epsilon=0.0)
            eigs = np.linalg.eigvalsh(A.to_dense())
            assert eigs.max() <= 1.0 + 1e-10
            assert eigs.min() >= -1.0 - 1e-10

    def test_double_normalization_rejected(self):
        rng = np.random.default_rng(2)
        A = normalize_affinity(random_affinity(rng, 20))
        with pytest.raises(InputError):
            normalize_affinity(A)


# ----------------------------------------------------------------------
# build_label_matrix
# ----------------------------------------------------------------------

class TestBuildLabelMatrix:
    def test_single_label(self):
        seed = make_seed(3, 2, [0], [2])
        np.testing.assert_array_equal(
            build_label_matrix(seed), [[0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]
        )

    def test_fully_labelled_is_one_hot(self):
        seed = make_seed(4, 3, [0, 1, 2, 3], [1, 3, 2, 1])
        Y = build_label_matrix(seed)
        np.testing.assert_array_equal(Y.sum(axis=1), np.ones(4))
        assert ((Y == 0) | (Y == 1)).all()

    def test_two_labels_exact_positions(self):
        seed = make_seed(4, 3, [0, 2], [1, 2])
        Y = build_label_matrix(seed)
        assert Y[0, 0] == 1.0 and Y[2, 1] == 1.0
        assert Y.sum() == 2.0

    def test_label_out_of_range_rejected(self):
        with pytest.raises(InputError):
            make_seed(3, 2, [0], [3])

    def test_index_overlap_rejected(self):
        with pytest.raises(InputError):
            LabelSeed(
                n=3,
                num_classes=2,
                labelled_idx=np.array([0, 1]),
                unlabelled_idx=np.array([1, 2]),
                labels=np.array([1, 2]),
            )


# ----------------------------------------------------------------------
# solve_propagation
# ----------------------------------------------------------------------

class TestSolvePropagation:
    def test_edgeless_graph_returns_seed_matrix(self):
        import scipy.sparse as sparse

        from labelprop.graph import SparseAffinity

        empty = sparse.csr_matrix((4, 4))
        W = SparseAffinity(
            n=4, row_offsets=empty.indptr, col_indices=empty.indices, values=empty.data
        )
        A = normalize_affinity(W)
        seed = make_seed(4, 2, [0, 3], [1, 2])
        Y = build_label_matrix(seed)
        res = solve_propagation(A, Y, PropagationConfig(k=1))
        np.testing.assert_array_equal(res.F, Y)
        assert res.all_converged
        assert res.iterations.max() == 0

    def test_gamma_from_table_mu(self):
        cfg = PropagationConfig(k=1, mu=0.01)
        assert cfg.gamma == pytest.approx(1.0 / 1.01)
        assert cfg.gamma == pytest.approx(0.990099, abs=1e-6)
        assert cfg.gamma * (1.0 + cfg.mu) == 1.0

    def test_three_node_path_matches_dense_inverse(self):
        import scipy.sparse as sparse

        from labelprop.graph import SparseAffinity

        dense = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
        csr = sparse.csr_matrix(dense)
        W = SparseAffinity(n=3, row_offsets=csr.indptr, col_indices=csr.indices, values=csr.data)
        A = normalize_affinity(W, degree_epsilon=0.0)
        seed = make_seed(3, 2, [0], [1])
        Y = build_label_matrix(seed)
        cfg = PropagationConfig(k=1, mu=0.01, cg_tol=1e-12)
        res = solve_propagation(A, Y, cfg)
        expected = dense_solve_oracle(A.to_dense(), Y, cfg.gamma)
        np.testing.assert_allclose(res.F, expected, atol=1e-6)

    def test_zero_seed_column_stays_zero(self):
        rng = np.random.default_rng(4)
        A = normalize_affinity(random_affinity(rng, 30))
        seed = make_seed(30, 3, [0, 1], [1, 1])  # class 2 and 3 unseeded
        Y = build_label_matrix(seed)
        res = solve_propagation(A, Y, PropagationConfig(k=6))
        np.testing.assert_array_equal(res.F[:, 1], np.zeros(30))
        np.testing.assert_array_equal(res.F[:, 2], np.zeros(30))

    def test_iteration_cap_reported_not_fatal(self):
        rng = np.random.default_rng(9)
        A = normalize_affinity(random_affinity(rng, 50))
        seed = make_seed(50, 2, [0, 1], [1, 2])
        Y = build_label_matrix(seed)
        res = solve_propagation(A, Y, PropagationConfig(k=6, cg_tol=1e-14, cg_max_iter=1))
        assert not res.all_converged
        assert res.iterations.max() == 1

    def test_unnormalized_affinity_rejected(self):
        rng = np.random.default_rng(1)
        W = random_affinity(rng, 10)
        with pytest.raises(InputError):
            solve_propagation(W, np.zeros((10, 2)), PropagationConfig(k=3))


# ----------------------------------------------------------------------
# laplacian_cost
# ----------------------------------------------------------------------

class TestLaplacianCost:
    def test_zero_graph_zero_fidelity(self):
        import scipy.sparse as sparse

        from labelprop.graph import SparseAffinity

        empty = sparse.csr_matrix((3, 3))
        W = SparseAffinity(n=3, row_offsets=empty.indptr, col_indices=empty.indices, values=empty.data)
        A = normalize_affinity(W)
        Y = np.zeros((3, 2))
        Y[0, 0] = 1.0
        assert laplacian_cost(A, Y, Y, mu=0.5) == 0.0

    def test_pure_fidelity_term(self):
        """F = 0 against n_l one-hot rows costs mu * n_l / 2."""
        import scipy.sparse as sparse

        from labelprop.graph import SparseAffinity

        empty = sparse.csr_matrix((5, 5))
        W = SparseAffinity(n=5, row_offsets=empty.indptr, col_indices=empty.indices, values=empty.data)
        A = normalize_affinity(W)
        seed = make_seed(5, 3, [0, 2, 4], [1, 2, 3])
        Y = build_label_matrix(seed)
        mu = 0.8
        assert laplacian_cost(A, np.zeros_like(Y), Y, mu) == pytest.approx(mu * 3 / 2)

    def test_matches_naive_double_loop(self):
        rng = np.random.default_rng(17)
        for trial in range(5):
            aff = random_affinity(rng, 12, k=3)
            A = normalize_affinity(aff, degree_epsilon=0.0)
            F = rng.normal(size=(12, 3))
            Y = rng.normal(size=(12, 3))
            expected = naive_cost_oracle(aff.to_dense(), F, Y, mu=0.37)
            got = laplacian_cost(A, F, Y, mu=0.37)
            assert got == pytest.approx(expected, rel=1e-10)

    def test_tampered_degrees_detected(self):
        rng = np.random.default_rng(23)
        A = normalize_affinity(random_affinity(rng, 10, k=2))
        A.degrees = np.zeros_like(A.degrees)  # now inconsistent with stored edges
        with pytest.raises(InconsistencyError):
            laplacian_cost(A, np.ones((10, 2)), np.ones((10, 2)), mu=0.1)


# ----------------------------------------------------------------------
# extract_pseudo_labels
# ----------------------------------------------------------------------

class TestExtractPseudoLabels:
    def test_argmax_row(self):
        seed = make_seed(1, 3, [], [])
        labels, _ = extract_pseudo_labels(np.array([[0.2, 0.7, 0.1]]), seed)
        assert labels[0] == 2

    def test_tie_breaks_to_lowest_class(self):
        seed = make_seed(1, 2, [], [])
        labels, _ = extract_pseudo_labels(np.array([[0.5, 0.5]]), seed)
        assert labels[0] == 1

    def test_labelled_rows_never_overwritten(self):
        seed = make_seed(2, 3, [0], [3])
        F = np.array([[0.9, 0.05, 0.05], [0.1, 0.8, 0.1]])
        labels, _ = extract_pseudo_labels(F, seed)
        assert labels[0] == 3 and labels[1] == 2

    def test_all_zero_row_counted_and_assigned_class_one(self):
        seed = make_seed(2, 3, [], [])
        labels, degenerate = extract_pseudo_labels(np.array([[0.0, 0.0, 0.0], [0.0, 0.2, 0.0]]), seed)
        assert labels[0] == 1 and labels[1] == 2
        assert degenerate == 1

    def test_scale_invariance(self):
        rng = np.random.default_rng(31)
        F = rng.normal(size=(40, 5))
        seed = make_seed(40, 5, [0], [4])
        base, _ = extract_pseudo_labels(F, seed)
        for c in (1e-6, 0.5, 3.0, 1e7):
            scaled, _ = extract_pseudo_labels(c * F, seed)
            np.testing.assert_array_equal(scaled, base)


# ----------------------------------------------------------------------
# End-to-end propagation properties
# ----------------------------------------------------------------------

class TestPropagationProperties:
    def test_oracle_equivalence_small_random_graphs(self):
        """CG agrees with the dense direct solve elementwise and in argmax."""
        rng = np.random.default_rng(42)
        for trial in range(10):
            n = int(rng.integers(20, 120))
            C = int(rng.integers(2, 8))
            V = rng.normal(size=(n, 6))
            n_l = int(rng.integers(C, max(C + 1, n // 5)))
            labelled = rng.choice(n, size=n_l, replace=False)
            labels = np.concatenate(
                [np.arange(1, C + 1), rng.integers(1, C + 1, size=n_l - C)]
            )[:n_l]
            seed = make_seed(n, C, labelled, labels)
            cfg = PropagationConfig(k=8, mu=0.01, cg_tol=1e-10)
            A = normalize_affinity(build_knn_affinity(V, cfg.k))
            Y = build_label_matrix(seed)
            res = solve_propagation(A, Y, cfg)
            expected = dense_solve_oracle(A.to_dense(), Y, cfg.gamma)
            np.testing.assert_allclose(res.F, expected, atol=1e-5)
            np.testing.assert_array_equal(res.F.argmax(axis=1), expected.argmax(axis=1))

    def test_minimizer_consistency(self):
        """The energy's exact minimizer (independent dense solve) beats the
        seed matrix and every 1%-norm random perturbation.

        The ordered double sum in the energy makes its exact stationarity
        system ((1 + mu/2) I - A) F = (mu/2) Y; the propagation solver's
        system ((1 + mu) I - A) F = mu Y is the conventional single-counted
        form, equal up to that shift.  The minimality property is checked
        at the true minimizer; the solver is checked against its own dense
        oracle elsewhere.
        """
        rng = np.random.default_rng(77)
        aff = random_affinity(rng, 60, k=5)
        A = normalize_affinity(aff, degree_epsilon=0.0)
        seed = make_seed(60, 3, [0, 1, 2], [1, 2, 3])
        Y = build_label_matrix(seed)
        mu = 0.01
        dense = A.to_dense()
        F_min = np.linalg.solve((1.0 + mu / 2.0) * np.eye(60) - dense, (mu / 2.0) * Y)
        q_star = laplacian_cost(A, F_min, Y, mu)
        assert q_star <= laplacian_cost(A, Y, Y, mu) + 1e-12
        scale = 0.01 * np.linalg.norm(F_min)
        for _ in range(100):
            delta = rng.normal(size=F_min.shape)
            delta *= scale / np.linalg.norm(delta)
            assert q_star <= laplacian_cost(A, F_min + delta, Y, mu) + 1e-12

    def test_cg_solution_energy_below_seed(self):
        """Even the conventionally-scaled propagation output, rescaled by
        mu / (1 + mu), costs no more than the raw seed matrix."""
        rng = np.random.default_rng(78)
        aff = random_affinity(rng, 60, k=5)
        A = normalize_affinity(aff, degree_epsilon=0.0)
        seed = make_seed(60, 3, [0, 1, 2], [1, 2, 3])
        Y = build_label_matrix(seed)
        cfg = PropagationConfig(k=5, mu=0.01, cg_tol=1e-12)
        res = solve_propagation(A, Y, cfg)
        rescaled = (cfg.mu / (1.0 + cfg.mu)) * res.F
        np.testing.assert_array_equal(rescaled.argmax(axis=1), res.F.argmax(axis=1))
        assert laplacian_cost(A, rescaled, Y, cfg.mu) <= laplacian_cost(A, Y, Y, cfg.mu)

    def test_permutation_equivariance(self):
        """Permuting samples permutes pseudo-labels identically."""
        rng = np.random.default_rng(55)
        n, C = 50, 3
        V = rng.normal(size=(n, 4))
        labelled = np.array([0, 1, 2])
        labels = np.array([1, 2, 3])
        cfg = PropagationConfig(k=6, mu=0.01, cg_tol=1e-12)

        def run(Vx, lab_idx, labs):
            seed = make_seed(n, C, lab_idx, labs)
            A = normalize_affinity(build_knn_affinity(Vx, cfg.k))
            res = solve_propagation(A, build_label_matrix(seed), cfg)
            out, _ = extract_pseudo_labels(res.F, seed)
            return out

        base = run(V, labelled, labels)
        perm = rng.permutation(n)
        permuted = run(V[perm], np.array([int(np.flatnonzero(perm == i)[0]) for i in labelled]), labels)
        np.testing.assert_array_equal(permuted, base[perm])
