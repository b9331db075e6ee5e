"""Compress a multi-sample context selection into a low-rank direction set.

The user's context keys K_ctx (N x T) are whitened with the key statistics'
ZCA transform; the top-S eigenvectors of the whitened scatter span the most
informative S-dimensional subspace, which is mapped back to row-space
directions D_S for the weight update.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import genmodel, linalg
from .assocmem import KeyStats

__all__ = [
    "ContextSelection",
    "DirectionSet",
    "whiten_context",
    "context_information",
    "reduce_context",
    "axis_aligned_scores",
    "save_direction_set",
    "load_direction_set",
]


@dataclass(frozen=True)
class ContextSelection:
    """Selected key columns plus where each one came from."""

    keys: np.ndarray  # (N, T) float64
    sources: tuple = field(default_factory=tuple)  # per-column (seed, (y, x))

    def __post_init__(self):
        k = linalg.as_matrix(self.keys, "context keys")
        if k.shape[1] < 1:
            raise ValueError("context selection needs at least one key column")
        object.__setattr__(self, "keys", k)
        if self.sources and len(self.sources) != k.shape[1]:
            raise ValueError("one source descriptor per key column required")

    @property
    def n_keys(self) -> int:
        return self.keys.shape[1]


@dataclass(frozen=True)
class DirectionSet:
    """Rank-S basis of the allowed weight-delta row space."""

    matrix: np.ndarray  # (N, S) float64, unit-norm columns
    rank: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        m = linalg.as_matrix(self.matrix, "direction set")
        object.__setattr__(self, "matrix", m)
        if m.shape[1] != self.rank:
            raise ValueError(f"expected {self.rank} columns, got {m.shape[1]}")
        s = np.linalg.svd(m, compute_uv=False)
        if s[-1] <= 1e-8 * s[0]:
            raise ValueError("direction columns are not linearly independent")


def whiten_context(K_ctx, stats: KeyStats) -> np.ndarray:
    """Whitened context K' = Z K_ctx."""
    K = linalg.as_matrix(K_ctx, "K_ctx")
    if K.shape[0] != stats.dim:
        raise ValueError(f"keys have dim {K.shape[0]}, stats expect {stats.dim}")
    return stats.Z @ K


def context_information(K_prime, n: int, t: int) -> float:
    """Gaussian-code information content of a whitened context.

    trace(K'^T K') / (2t) + (n / 2t) * log(2*pi).
    """
    K = linalg.as_matrix(K_prime, "K_prime")
    if t < 1:
        raise ValueError("t must be >= 1")
    return float(np.sum(K * K) / (2.0 * t) + n / (2.0 * t) * np.log(2.0 * np.pi))


def _sha256_f64(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


def reduce_context(K_ctx, stats: KeyStats, S: int) -> DirectionSet:
    """Top-S informative directions of the context, in row-space coordinates.

    Q_S = leading eigenvectors of K' K'^T (K' the whitened context);
    D_S = Z Q_S with columns normalized to unit length (only the spanned
    subspace matters downstream).
    """
    K = linalg.as_matrix(K_ctx, "K_ctx")
    n, t = K.shape
    if not 1 <= S <= min(n, t):
        raise ValueError(f"S must be in 1..min(N, T) = {min(n, t)}, got {S}")
    Kp = whiten_context(K, stats)
    G = Kp @ Kp.T
    eig = linalg.sym_eig(G, tol=1e-8 * (1.0 + float(np.max(np.abs(G)))))
    w = eig.eigenvalues
    achievable = int(np.sum(w > 1e-10 * w[0])) if w[0] > 0 else 0
    if S > achievable:
        raise ValueError(
            f"context has numerical rank {achievable}; cannot extract {S} directions"
        )
    Q = eig.eigenvectors[:, :S]
    D = stats.Z @ Q
    D = D / np.linalg.norm(D, axis=0, keepdims=True)
    provenance = {
        "context_sha256": _sha256_f64(K),
        "stats_sha256": stats.content_hash(),
    }
    return DirectionSet(matrix=D, rank=S, provenance=provenance)


def axis_aligned_scores(K_ctx, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit context responses (e_i^T k)^2 / sigma_i^2 summed over columns.

    Returns (scores, indices sorted by descending score); the top entries
    identify the units most correlated with the context, used by the
    unit-zeroing baseline.
    """
    K = linalg.as_matrix(K_ctx, "K_ctx")
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if s.shape[0] != K.shape[0]:
        raise ValueError(f"sigma has length {s.shape[0]}, keys have dim {K.shape[0]}")
    if np.any(s <= 0.0):
        raise ValueError("sigma entries must be positive")
    scores = np.sum((K / s[:, None]) ** 2, axis=1)
    order = np.argsort(scores)[::-1]
    return scores, order


def save_direction_set(ds: DirectionSet, path) -> None:
    genmodel.write_gtf(
        path,
        {"D_S": ds.matrix},
        {"direction_set": {"rank": ds.rank, "provenance": ds.provenance}},
    )


def load_direction_set(path) -> DirectionSet:
    tensors, meta = genmodel.read_gtf(path)
    info = meta.get("direction_set")
    if info is None or "D_S" not in tensors:
        raise genmodel.FixtureError(f"{path}: not a direction-set container")
    return DirectionSet(
        matrix=tensors["D_S"].astype(np.float64),
        rank=int(info["rank"]),
        provenance=dict(info.get("provenance", {})),
    )
