import numpy as np
import pytest

from remem import linalg


def solve_pivoted(A, B):
    """Independent dense solve A X = B by Gaussian elimination with
    partial pivoting; oracle for the least-squares normal equations."""
    A = np.array(A, dtype=np.float64)
    B = np.array(B, dtype=np.float64)
    n = A.shape[0]
    aug = np.hstack([A, B])
    for col in range(n):
        piv = col + np.argmax(np.abs(aug[col:, col]))
        if abs(aug[piv, col]) < 1e-300:
            raise ZeroDivisionError("singular matrix in oracle")
        if piv != col:
            aug[[col, piv]] = aug[[piv, col]]
        aug[col] = aug[col] / aug[col, col]
        for row in range(n):
            if row != col:
                aug[row] -= aug[row, col] * aug[col]
    return aug[:, n:]


class TestSolveLeastSquares:
    def test_identity_keys(self):
        rng = np.random.default_rng(0)
        V = rng.normal(size=(4, 6))
        W = linalg.solve_least_squares(np.eye(6), V)
        np.testing.assert_allclose(W, V, atol=1e-12)

    def test_orthonormal_keys_exact_recall(self):
        rng = np.random.default_rng(1)
        K, _ = np.linalg.qr(rng.normal(size=(8, 5)))
        V = rng.normal(size=(3, 5))
        W = linalg.solve_least_squares(K, V)
        np.testing.assert_allclose(W, V @ K.T, atol=1e-10)
        np.testing.assert_allclose(W @ K, V, atol=1e-10)

    def test_matches_normal_equation_oracle(self):
        rng = np.random.default_rng(2)
        K = rng.normal(size=(6, 10))
        V = rng.normal(size=(4, 10))
        W = linalg.solve_least_squares(K, V)
        # oracle: W^T solves (K K^T) W^T = K V^T by pivoted elimination
        Wt = solve_pivoted(K @ K.T, K @ V.T)
        np.testing.assert_allclose(W, Wt.T, atol=1e-8)

    def test_singular_keys_minimum_norm(self):
        rng = np.random.default_rng(3)
        base = rng.normal(size=(5, 2))
        K = base @ rng.normal(size=(2, 7))  # rank 2
        V = rng.normal(size=(3, 7))
        W = linalg.solve_least_squares(K, V)
        np.testing.assert_allclose(W, V @ np.linalg.pinv(K), atol=1e-8)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="columns"):
            linalg.solve_least_squares(np.eye(3), np.ones((2, 4)))

    def test_nonfinite_rejected(self):
        K = np.eye(3)
        K[0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            linalg.solve_least_squares(K, np.ones((2, 3)))

    @pytest.mark.parametrize("n,t,m", [(3, 5, 2), (6, 4, 3), (8, 8, 8), (5, 12, 7)])
    def test_residual_gradient_invariant(self, n, t, m):
        rng = np.random.default_rng(n * 100 + t)
        K = rng.normal(size=(n, t))
        V = rng.normal(size=(m, t))
        W = linalg.solve_least_squares(K, V)
        grad = V @ K.T - W @ (K @ K.T)
        bound = 1e-6 * (np.linalg.norm(V @ K.T) + 1.0)
        assert np.linalg.norm(grad) < bound


class TestPseudoinverse:
    def test_diagonal(self):
        np.testing.assert_allclose(
            linalg.pseudoinverse(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=1e-12
        )

    def test_orthonormal_columns(self):
        rng = np.random.default_rng(4)
        A, _ = np.linalg.qr(rng.normal(size=(6, 3)))
        np.testing.assert_allclose(linalg.pseudoinverse(A), A.T, atol=1e-10)

    def test_penrose_conditions(self):
        rng = np.random.default_rng(5)
        A = rng.normal(size=(5, 3))
        P = linalg.pseudoinverse(A)
        np.testing.assert_allclose(A @ P @ A, A, atol=1e-8)
        np.testing.assert_allclose(P @ A @ P, P, atol=1e-8)
        np.testing.assert_allclose(A @ P, (A @ P).T, atol=1e-8)
        np.testing.assert_allclose(P @ A, (P @ A).T, atol=1e-8)


class TestSymEig:
    def test_diagonal(self):
        eig = linalg.sym_eig(np.diag([4.0, 9.0]), tol=1e-8)
        np.testing.assert_allclose(eig.eigenvalues, [9.0, 4.0])
        np.testing.assert_allclose(np.abs(eig.eigenvectors), np.eye(2)[:, ::-1], atol=1e-12)

    def test_identity(self):
        eig = linalg.sym_eig(np.eye(5), tol=1e-8)
        np.testing.assert_allclose(eig.eigenvalues, np.ones(5))

    @pytest.mark.parametrize("n", [8, 64, 256])
    def test_random_psd_reconstruction(self, n):
        rng = np.random.default_rng(n)
        A = rng.normal(size=(n, n))
        C = A @ A.T
        eig = linalg.sym_eig(C, tol=1e-6 * np.max(np.abs(C)))
        rel = np.linalg.norm(eig.reconstruct() - C) / np.linalg.norm(C)
        assert rel < 1e-6
        np.testing.assert_allclose(
            eig.eigenvectors.T @ eig.eigenvectors, np.eye(n), atol=1e-8
        )
        assert np.all(np.diff(eig.eigenvalues) <= 1e-12)

    def test_asymmetric_rejected(self):
        C = np.array([[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(ValueError, match="asymmetric"):
            linalg.sym_eig(C, tol=1e-8)

    def test_negative_eigenvalue_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            linalg.sym_eig(np.diag([1.0, -0.5]), tol=1e-8)

    def test_roundoff_negative_clamped(self):
        eig = linalg.sym_eig(np.diag([1.0, -1e-10]), tol=1e-8)
        assert eig.eigenvalues[-1] == 0.0


class TestZca:
    def test_diagonal(self):
        eig = linalg.sym_eig(np.diag([4.0, 9.0]), tol=1e-8)
        np.testing.assert_allclose(linalg.zca(eig), np.diag([0.5, 1.0 / 3.0]), atol=1e-12)

    def test_identity(self):
        eig = linalg.sym_eig(np.eye(4), tol=1e-8)
        np.testing.assert_allclose(linalg.zca(eig), np.eye(4), atol=1e-12)

    def test_whitens_random_psd(self):
        rng = np.random.default_rng(7)
        A = rng.normal(size=(6, 6))
        C = A @ A.T + 0.1 * np.eye(6)
        eig = linalg.sym_eig(C, tol=1e-6 * np.max(np.abs(C)))
        Z = linalg.zca(eig, epsilon=1e-6)
        np.testing.assert_allclose(Z @ C @ Z, np.eye(6), atol=1e-5)
        np.testing.assert_allclose(Z, Z.T, atol=1e-10)
        np.testing.assert_allclose(Z @ C, C @ Z, atol=1e-8)

    def test_epsilon_floors_null_space(self):
        eig = linalg.sym_eig(np.diag([1.0, 0.0]), tol=1e-8)
        Z = linalg.zca(eig, epsilon=1e-4)
        np.testing.assert_allclose(Z, np.diag([1.0, 100.0]), atol=1e-10)


class TestSvdTruncate:
    def test_rank_one_unchanged(self):
        rng = np.random.default_rng(8)
        M = np.outer(rng.normal(size=5), rng.normal(size=4))
        np.testing.assert_allclose(linalg.svd_truncate(M, 1), M, atol=1e-8)

    def test_full_rank_unchanged(self):
        rng = np.random.default_rng(9)
        M = rng.normal(size=(4, 6))
        np.testing.assert_allclose(linalg.svd_truncate(M, 4), M, atol=1e-8)

    def test_rank_clamped_not_error(self):
        rng = np.random.default_rng(10)
        M = rng.normal(size=(3, 5))
        np.testing.assert_allclose(linalg.svd_truncate(M, 99), M, atol=1e-8)

    def test_beats_random_projections(self):
        rng = np.random.default_rng(11)
        M = rng.normal(size=(6, 6))
        best = linalg.svd_truncate(M, 2)
        resid = np.linalg.norm(M - best)
        for _ in range(1000):
            Q, _ = np.linalg.qr(rng.normal(size=(6, 2)))
            proj = Q @ (Q.T @ M)
            assert resid <= np.linalg.norm(M - proj) + 1e-12

    def test_idempotent(self):
        rng = np.random.default_rng(12)
        M = rng.normal(size=(7, 5))
        once = linalg.svd_truncate(M, 3)
        twice = linalg.svd_truncate(once, 3)
        assert np.max(np.abs(once - twice)) < 1e-10

    def test_numerical_rank_bound(self):
        rng = np.random.default_rng(13)
        M = rng.normal(size=(8, 8))
        t = linalg.svd_truncate(M, 3)
        s = np.linalg.svd(t, compute_uv=False)
        assert s[3] < 1e-10 * s[0]

    def test_rank_below_one_rejected(self):
        with pytest.raises(ValueError, match="rank"):
            linalg.svd_truncate(np.eye(2), 0)


class TestFrechetGaussian:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(14)
        A = rng.normal(size=(4, 4))
        cov = A @ A.T
        mu = rng.normal(size=4)
        assert linalg.frechet_gaussian(mu, cov, mu, cov) == pytest.approx(0.0, abs=1e-8)

    def test_equal_covariance_mean_shift(self):
        rng = np.random.default_rng(15)
        A = rng.normal(size=(3, 3))
        cov = A @ A.T
        mu1 = np.array([1.0, 2.0, 3.0])
        mu2 = np.array([0.0, 0.0, 1.0])
        expected = np.sum((mu1 - mu2) ** 2)
        assert linalg.frechet_gaussian(mu1, cov, mu2, cov) == pytest.approx(expected, rel=1e-8)

    def test_commuting_diagonal_case(self):
        mu = np.zeros(2)
        got = linalg.frechet_gaussian(mu, np.diag([1.0, 4.0]), mu, np.diag([4.0, 1.0]))
        # sum_i (sqrt(s1_i) - sqrt(s2_i))^2 = 1 + 1
        assert got == pytest.approx(2.0, rel=1e-10)

    def test_non_psd_rejected(self):
        with pytest.raises(ValueError, match="PSD"):
            linalg.frechet_gaussian(np.zeros(2), np.diag([1.0, -1.0]), np.zeros(2), np.eye(2))

    def test_nonnegative_on_random_instances(self):
        rng = np.random.default_rng(16)
        for _ in range(20):
            A = rng.normal(size=(5, 5))
            B = rng.normal(size=(5, 5))
            v = linalg.frechet_gaussian(
                rng.normal(size=5), A @ A.T, rng.normal(size=5), B @ B.T
            )
            assert v >= 0.0
