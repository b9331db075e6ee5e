"""Dense linear algebra for the rewriting engine.

All routines operate on 2-D float64 arrays (the rest of the package keeps
tensors in float32 and converts at the boundary).  Backed by numpy's LAPACK
bindings; the contracts below (minimum-norm least squares, descending
eigenvalues, Eckart-Young truncation) are what the rest of the package
relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EigenDecomposition",
    "as_matrix",
    "solve_least_squares",
    "pseudoinverse",
    "sym_eig",
    "zca",
    "svd_truncate",
    "frechet_gaussian",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array; raise ValueError otherwise."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class EigenDecomposition:
    """Symmetric eigendecomposition with eigenvalues sorted descending.

    eigenvectors[:, i] is the unit eigenvector for eigenvalues[i];
    the columns are orthonormal.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T


def solve_least_squares(K, V) -> np.ndarray:
    """Return W minimizing ||V - W K||_F^2 for K (N x T) and V (M x T).

    When K K^T is singular the minimum-norm solution V K^+ is returned.
    """
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    if K.shape[1] != V.shape[1]:
        raise ValueError(
            f"K has {K.shape[1]} columns but V has {V.shape[1]}; "
            "keys and values must pair up"
        )
    # lstsq on the transposed system: minimizes ||K^T W^T - V^T||_F,
    # returning the minimum-norm W row by row.
    wt, *_ = np.linalg.lstsq(K.T, V.T, rcond=None)
    return wt.T


def pseudoinverse(A) -> np.ndarray:
    """Moore-Penrose pseudoinverse."""
    A = as_matrix(A, "A")
    return np.linalg.pinv(A)


def sym_eig(C, tol: float = 1e-8) -> EigenDecomposition:
    """Eigendecomposition of a symmetric PSD matrix, eigenvalues descending.

    Asymmetry beyond `tol` and eigenvalues below -`tol` are rejected;
    round-off eigenvalues in [-tol, 0] are clamped to zero.
    """
    C = as_matrix(C, "C")
    if C.shape[0] != C.shape[1]:
        raise ValueError(f"expected a square matrix, got {C.shape}")
    asym = np.max(np.abs(C - C.T)) if C.size else 0.0
    if asym > tol:
        raise ValueError(f"matrix is asymmetric: max |C - C^T| = {asym:.3e} > {tol:.3e}")
    w, u = np.linalg.eigh((C + C.T) / 2.0)
    if w.size and w[0] < -tol:
        raise ValueError(
            f"matrix has significantly negative eigenvalue {w[0]:.3e}; not PSD"
        )
    w = np.clip(w, 0.0, None)
    order = np.argsort(w)[::-1]
    return EigenDecomposition(eigenvalues=w[order], eigenvectors=u[:, order])


def zca(stats: EigenDecomposition, epsilon: float = 1e-12) -> np.ndarray:
    """Symmetric whitening transform U diag(sigma^-1/2) U^T.

    Eigenvalues below `epsilon` are raised to `epsilon` so the transform
    stays bounded on a rank-deficient spectrum.
    """
    w = np.maximum(stats.eigenvalues, epsilon)
    u = stats.eigenvectors
    z = (u / np.sqrt(w)) @ u.T
    return (z + z.T) / 2.0


def svd_truncate(M, rank: int) -> np.ndarray:
    """Best Frobenius rank-`rank` approximation of M (Eckart-Young).

    Ranks above min(rows, cols) are clamped; rank must be >= 1.
    """
    M = as_matrix(M, "M")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    rank = min(rank, min(M.shape))
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    return (u[:, :rank] * s[:rank]) @ vt[:rank]


def _sqrt_psd(C: np.ndarray) -> np.ndarray:
    w, u = np.linalg.eigh((C + C.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (u * np.sqrt(w)) @ u.T


def frechet_gaussian(mu1, cov1, mu2, cov2) -> float:
    """Frechet distance between Gaussians (mu1, cov1) and (mu2, cov2).

    ||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^{1/2}).  The matrix
    square root is taken through the eigendecomposition of the symmetrized
    product sqrt(cov1) cov2 sqrt(cov1); round-off negatives clamp to zero,
    and a slightly negative total (> -1e-8 scale) clamps to 0.
    """
    mu1 = np.asarray(mu1, dtype=np.float64).ravel()
    mu2 = np.asarray(mu2, dtype=np.float64).ravel()
    cov1 = as_matrix(cov1, "cov1")
    cov2 = as_matrix(cov2, "cov2")
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise ValueError("mean/covariance shapes do not match")
    for name, cov in (("cov1", cov1), ("cov2", cov2)):
        if np.max(np.abs(cov - cov.T)) > 1e-8 * (1.0 + np.max(np.abs(cov))):
            raise ValueError(f"{name} is not symmetric")
        wmin = np.linalg.eigvalsh((cov + cov.T) / 2.0).min()
        if wmin < -1e-8 * (1.0 + np.max(np.abs(cov))):
            raise ValueError(f"{name} is not PSD (min eigenvalue {wmin:.3e})")
    s1 = _sqrt_psd(cov1)
    inner = s1 @ cov2 @ s1
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)
    return max(value, 0.0)
