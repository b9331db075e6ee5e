"""Associative-memory view of a convolutional layer.

A conv layer's weight tensor, reshaped to an M x N matrix W (M = out_ch *
kh * kw, N = in_ch), maps a single-location input feature column k to the
kh x kw patch of output features that location contributes: v = W k.  This
module builds that view, gathers second-moment key statistics, and applies
the exact constrained least-squares insertion of a new (k*, v*) pair.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import genmodel, linalg
from .genmodel import Generator, LayerSpec
from .linalg import EigenDecomposition

__all__ = [
    "AssocView",
    "KeyStats",
    "as_assoc_view",
    "to_layer",
    "weights_to_matrix",
    "matrix_to_weights",
    "build_orthogonal_memory",
    "fit_memory",
    "estimate_key_stats",
    "key_stats_from_keys",
    "update_direction",
    "insert_linear_closed_form",
    "recall",
    "save_key_stats",
    "load_key_stats",
]


@dataclass(frozen=True)
class AssocView:
    """M x N key-to-value matrix plus the shape needed to reshape back."""

    matrix: np.ndarray  # (M, N) float64
    out_channels: int
    kernel: tuple[int, int]

    def __post_init__(self):
        m = linalg.as_matrix(self.matrix, "assoc matrix")
        object.__setattr__(self, "matrix", m)
        kh, kw = self.kernel
        if m.shape[0] != self.out_channels * kh * kw:
            raise ValueError(
                f"matrix has {m.shape[0]} rows, expected out_ch*kh*kw = "
                f"{self.out_channels * kh * kw}"
            )

    @property
    def in_channels(self) -> int:
        return self.matrix.shape[1]

    def with_matrix(self, matrix: np.ndarray) -> "AssocView":
        return AssocView(matrix, self.out_channels, self.kernel)


def weights_to_matrix(weights: np.ndarray) -> np.ndarray:
    """Reshape (out, in, kh, kw) conv weights to the M x N memory matrix.

    Row (o, a, b) holds the coefficients sending an input key to the output
    located (a - ry, b - rx) away from it, i.e. the kernel is index-flipped
    so that `matrix @ k` reads as the natural top-left-to-bottom-right
    output patch of a single isolated input location.
    """
    out_ch, in_ch, kh, kw = weights.shape
    flipped = weights[:, :, ::-1, ::-1]
    return (
        flipped.transpose(0, 2, 3, 1)
        .reshape(out_ch * kh * kw, in_ch)
        .astype(np.float64)
    )


def matrix_to_weights(matrix: np.ndarray, out_ch: int, in_ch: int, kh: int, kw: int) -> np.ndarray:
    """Inverse of weights_to_matrix; returns float32 conv weights."""
    m = np.asarray(matrix, dtype=np.float64)
    w = m.reshape(out_ch, kh, kw, in_ch).transpose(0, 3, 1, 2)[:, :, ::-1, ::-1]
    return np.ascontiguousarray(w, dtype=np.float32)


def as_assoc_view(layer: LayerSpec) -> AssocView:
    return AssocView(
        weights_to_matrix(layer.weights), layer.out_channels, layer.kernel
    )


def to_layer(view: AssocView) -> np.ndarray:
    """Weight tensor (float32) for the view; inverse of as_assoc_view."""
    kh, kw = view.kernel
    return matrix_to_weights(view.matrix, view.out_channels, view.in_channels, kh, kw)


def recall(view: AssocView, k: np.ndarray) -> np.ndarray:
    return view.matrix @ np.asarray(k, dtype=np.float64).ravel()


def build_orthogonal_memory(
    pairs, out_channels: int | None = None, kernel: tuple[int, int] = (1, 1)
) -> AssocView:
    """Error-free memory sum(v_i k_i^T) over orthonormal keys.

    Keys must be unit-norm and mutually orthogonal within 1e-6; the first
    offending pair is reported otherwise.
    """
    pairs = [(np.asarray(k, np.float64).ravel(), np.asarray(v, np.float64).ravel()) for k, v in pairs]
    if not pairs:
        raise ValueError("need at least one (key, value) pair")
    for i, (k, _) in enumerate(pairs):
        norm = np.linalg.norm(k)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"key {i} is not unit-norm (|k| = {norm:.8f})")
    for i in range(len(pairs)):
        for j in range(i + 1, len(pairs)):
            dot = float(pairs[i][0] @ pairs[j][0])
            if abs(dot) > 1e-6:
                raise ValueError(
                    f"keys {i} and {j} are not orthogonal (dot = {dot:.3e})"
                )
    W = sum(np.outer(v, k) for k, v in pairs)
    return AssocView(W, out_channels if out_channels is not None else W.shape[0], kernel)


def fit_memory(
    K, V, out_channels: int | None = None, kernel: tuple[int, int] = (1, 1)
) -> AssocView:
    """Least-squares memory over key/value columns (minimum-norm solution)."""
    W = linalg.solve_least_squares(K, V)
    return AssocView(W, out_channels if out_channels is not None else W.shape[0], kernel)


@dataclass(frozen=True)
class KeyStats:
    """Second-moment statistics of layer keys, with derived transforms.

    C is the regularized second moment (raw moment plus epsilon * I);
    C_inv and the ZCA whitener Z are computed from its eigendecomposition.
    """

    C: np.ndarray
    n_samples: int
    epsilon: float
    eig: EigenDecomposition
    C_inv: np.ndarray
    Z: np.ndarray

    @property
    def dim(self) -> int:
        return self.C.shape[0]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.C.astype("<f8").tobytes())
        h.update(np.float64(self.epsilon).tobytes())
        return h.hexdigest()


def _split_f32(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split float64 into a float32 pair (hi, lo) with hi + lo ~ a.

    The reconstruction is the canonical double-precision value used
    everywhere, so statistics survive the float32 cache format without
    breaking bit-for-bit replay determinism.
    """
    hi = a.astype(np.float32)
    lo = (a - hi.astype(np.float64)).astype(np.float32)
    return hi, lo


def _canonical_spd(C: np.ndarray) -> np.ndarray:
    hi, lo = _split_f32(C)
    rec = hi.astype(np.float64) + lo.astype(np.float64)
    return (rec + rec.T) / 2.0


def _stats_from_raw_moment(C_raw: np.ndarray, n_samples: int, epsilon: float | None) -> KeyStats:
    C_raw = linalg.as_matrix(C_raw, "C")
    if epsilon is None:
        epsilon = 1e-4 * float(np.mean(np.diag(C_raw)))
    C = _canonical_spd(C_raw + epsilon * np.eye(C_raw.shape[0]))
    eig = linalg.sym_eig(C, tol=1e-6 * (1.0 + float(np.max(np.abs(C)))))
    w = eig.eigenvalues
    cutoff = (w[0] if w.size else 0.0) * 1e-14
    w_inv = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
    u = eig.eigenvectors
    C_inv = (u * w_inv) @ u.T
    Z = linalg.zca(eig, epsilon=max(cutoff, 1e-300))
    return KeyStats(C=C, n_samples=n_samples, epsilon=float(epsilon), eig=eig, C_inv=C_inv, Z=Z)


def key_stats_from_keys(K, epsilon: float | None = 0.0, normalize: bool = False) -> KeyStats:
    """KeyStats for an explicit key matrix K (N x T); C = K K^T (or /T)."""
    K = linalg.as_matrix(K, "K")
    C = K @ K.T
    if normalize:
        C = C / K.shape[1]
    return _stats_from_raw_moment(C, n_samples=K.shape[1], epsilon=epsilon)


def estimate_key_stats(
    gen: Generator, L: int, n_samples: int, seed: int, epsilon: float | None = None
) -> KeyStats:
    """Second moment of layer-L keys over all locations of sampled latents.

    C = mean over every spatial location of every sample of k k^T, then
    regularized by epsilon * I (default 1e-4 * mean diagonal).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    latents = genmodel.sample_latents(seed, n_samples, gen.latent_dim)
    acc = None
    count = 0
    for z in latents:
        k_map, _ = genmodel.features(gen, z, L)
        cols = k_map.data.reshape(k_map.channels, -1).astype(np.float64)
        acc = cols @ cols.T if acc is None else acc + cols @ cols.T
        count += cols.shape[1]
    C_raw = acc / count
    return _stats_from_raw_moment(C_raw, n_samples=n_samples, epsilon=epsilon)


def update_direction(stats: KeyStats, k_star) -> np.ndarray:
    """Row-space direction d = C^-1 k* along which an insertion moves W."""
    k = np.asarray(k_star, dtype=np.float64).ravel()
    if k.shape[0] != stats.dim:
        raise ValueError(f"key has length {k.shape[0]}, stats expect {stats.dim}")
    if not np.any(k):
        raise ValueError("k_star is zero; no update direction")
    return stats.C_inv @ k


def insert_linear_closed_form(
    view: AssocView, stats: KeyStats, k_star, v_star
) -> tuple[AssocView, np.ndarray]:
    """Exact constrained least-squares insertion of k* -> v*.

    Returns (W1 view, Lambda) with W1 = W0 + Lambda d^T, d = C^-1 k*, and
    W1 k* = v*.  Among all W satisfying the constraint this is the one
    minimizing the stored-pair error, assuming W0 satisfies the normal
    equations of the stats' key set.
    """
    k = np.asarray(k_star, dtype=np.float64).ravel()
    v = np.asarray(v_star, dtype=np.float64).ravel()
    if v.shape[0] != view.matrix.shape[0]:
        raise ValueError(
            f"v_star has length {v.shape[0]}, memory stores {view.matrix.shape[0]}"
        )
    d = update_direction(stats, k)
    dk = float(d @ k)
    scale = float(np.linalg.norm(d) * np.linalg.norm(k))
    if scale == 0.0 or abs(dk) < 1e-12 * scale:
        raise ValueError(
            "update direction is numerically zero; k_star lies in the null "
            "space of the regularized statistics"
        )
    lam = (v - view.matrix @ k) / dk
    W1 = view.matrix + np.outer(lam, d)
    return view.with_matrix(W1), lam


# ---------------------------------------------------------------------------
# Key-stats cache files (GTF v1 containers).
# ---------------------------------------------------------------------------


def save_key_stats(stats: KeyStats, path, extra_metadata: dict | None = None) -> None:
    """Write a stats cache: C as an exact float32 hi/lo pair plus the
    derived spectra (stored for inspection; recomputed on load)."""
    meta = dict(extra_metadata or {})
    meta["key_stats"] = {"n_samples": stats.n_samples, "epsilon": stats.epsilon}
    hi, lo = _split_f32(stats.C)
    genmodel.write_gtf(
        path,
        {
            "C": hi,
            "C_residual": lo,
            "eigenvalues": stats.eig.eigenvalues,
            "U": stats.eig.eigenvectors,
            "Z": stats.Z,
        },
        meta,
    )


def load_key_stats(path) -> tuple[KeyStats, dict]:
    """Rebuild KeyStats from a cache file; returns (stats, metadata).

    C is reconstructed exactly from its hi/lo pair and the derived
    matrices are recomputed in double precision, so a loaded cache is
    bit-identical to freshly estimated statistics.
    """
    tensors, meta = genmodel.read_gtf(path)
    info = meta.get("key_stats")
    if info is None or "C" not in tensors:
        raise genmodel.FixtureError(f"{path}: not a key-stats cache")
    C = tensors["C"].astype(np.float64)
    if "C_residual" in tensors:
        C = C + tensors["C_residual"].astype(np.float64)
    C = (C + C.T) / 2.0
    eig = linalg.sym_eig(C, tol=1e-5 * (1.0 + float(np.max(np.abs(C)))))
    w = eig.eigenvalues
    cutoff = (w[0] if w.size else 0.0) * 1e-14
    w_inv = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
    u = eig.eigenvectors
    C_inv = (u * w_inv) @ u.T
    Z = linalg.zca(eig, epsilon=max(cutoff, 1e-300))
    stats = KeyStats(
        C=C,
        n_samples=int(info["n_samples"]),
        epsilon=float(info["epsilon"]),
        eig=eig,
        C_inv=C_inv,
        Z=Z,
    )
    return stats, meta
