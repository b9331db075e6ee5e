"""Rank-constrained weight optimization through a layer's nonlinearity.

The closed-form insertion in `assocmem` only covers the linear map; here
the layer function f (convolution + bias + nonlinearity) is optimized
directly, either over the low-rank coefficients Lambda with the update
confined to W0 + Lambda D^T by construction, or over the free weights with
periodic projection back onto the constraint set.  Gradients are
hand-derived backprop through the small conv layers; no autodiff.

Also hosts the comparison baselines: whole-model fine-tuning, single-layer
unconstrained fitting, and unit zeroing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from . import genmodel, linalg
from .assocmem import AssocView, as_assoc_view, matrix_to_weights, weights_to_matrix
from .genmodel import Generator, LayerSpec
from .rankreduce import DirectionSet

__all__ = [
    "OptimConfig",
    "EditResult",
    "DivergenceError",
    "PatchObjective",
    "single_key_objective",
    "optimize_lambda_single",
    "optimize_lambda_multi",
    "projected_gd",
    "finetune_layer_unconstrained",
    "rank_constrained_discovery",
    "DiscoveryResult",
    "finetune_all",
    "zero_units",
]

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite or exploding loss."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class OptimConfig:
    """Optimizer settings; the defaults are the standard edit settings."""

    learning_rate: float = 0.05
    iterations: int = 2001
    project_every: int = 10
    optimizer: str = "adam_style"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.project_every < 1:
            raise ValueError("project_every must be >= 1")
        if self.optimizer not in ("adam_style", "plain_gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class EditResult:
    """Outcome of one optimization run."""

    loss_trace: np.ndarray
    constraint_residual: float
    wall_time: float
    config: OptimConfig
    view: AssocView | None = None
    lam: np.ndarray | None = None
    delta_matrix: np.ndarray | None = None
    generator: Generator | None = None

    def to_json_dict(self) -> dict:
        return {
            "loss_trace": [float(x) for x in self.loss_trace],
            "constraint_residual": float(self.constraint_residual),
            "wall_time": float(self.wall_time),
            "config": asdict(self.config),
        }


def save_edit_result(result: EditResult, json_path, delta_path=None) -> None:
    """Write the run record as JSON, optionally with the delta as a GTF blob."""
    import json as _json

    with open(json_path, "w") as f:
        _json.dump(result.to_json_dict(), f, indent=2, sort_keys=True)
    if delta_path is not None:
        if result.delta_matrix is None:
            raise ValueError("result carries no weight delta")
        genmodel.write_gtf(delta_path, {"delta": result.delta_matrix}, {"kind": "edit_delta"})


class _Optimizer:
    def __init__(self, kind: str, lr: float, shape):
        self.kind = kind
        self.lr = lr
        self.t = 0
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.kind == "plain_gd":
            return x - self.lr * g
        self.t += 1
        self.m = _ADAM_B1 * self.m + (1.0 - _ADAM_B1) * g
        self.v = _ADAM_B2 * self.v + (1.0 - _ADAM_B2) * g * g
        mh = self.m / (1.0 - _ADAM_B1**self.t)
        vh = self.v / (1.0 - _ADAM_B2**self.t)
        return x - self.lr * mh / (np.sqrt(vh) + _ADAM_EPS)


def _valid_conv(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Unpadded stride-1 convolution of (C, H, W) with (O, C, kh, kw)."""
    out_ch, in_ch, kh, kw = weights.shape
    c, h, w = x.shape
    vh, vw = h - kh + 1, w - kw + 1
    cols = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    cols = cols.transpose(1, 2, 0, 3, 4).reshape(vh * vw, c * kh * kw)
    out = cols @ weights.reshape(out_ch, -1).T
    return out.T.reshape(out_ch, vh, vw)


def _matrix_to_weights64(matrix: np.ndarray, out_ch: int, in_ch: int, kh: int, kw: int) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    w = m.reshape(out_ch, kh, kw, in_ch).transpose(0, 3, 1, 2)[:, :, ::-1, ::-1]
    return np.ascontiguousarray(w)


class PatchObjective:
    """Masked squared error of a layer's output patch against a target.

    The key patch is the conv input covering the target's receptive field
    (target size plus kernel-1 on each axis); the layer is applied without
    padding so every output cell sees real keys.  Loss is the mean over
    unmasked target cells and channels of the squared error, and gradients
    are returned in the associative-view matrix layout.
    """

    def __init__(self, layer: LayerSpec, K_patch, V_target, mask=None):
        self.layer = layer
        kh, kw = layer.kernel
        self.K = np.asarray(K_patch, dtype=np.float64)
        self.V = np.asarray(V_target, dtype=np.float64)
        if self.K.ndim != 3 or self.V.ndim != 3:
            raise ValueError("K_patch and V_target must be (C, H, W)")
        if self.K.shape[0] != layer.in_channels:
            raise ValueError(
                f"key patch has {self.K.shape[0]} channels, layer expects {layer.in_channels}"
            )
        if self.V.shape[0] != layer.out_channels:
            raise ValueError(
                f"target has {self.V.shape[0]} channels, layer produces {layer.out_channels}"
            )
        vh, vw = self.V.shape[1:]
        if self.K.shape[1] != vh + kh - 1 or self.K.shape[2] != vw + kw - 1:
            raise ValueError(
                f"key patch {self.K.shape[1:]} does not cover target {self.V.shape[1:]} "
                f"plus kernel margin {(kh - 1, kw - 1)}"
            )
        if mask is None:
            self.mask = np.ones((vh, vw), dtype=bool)
        else:
            self.mask = np.asarray(mask, dtype=bool)
            if self.mask.shape != (vh, vw):
                raise ValueError(f"mask shape {self.mask.shape} != target grid {(vh, vw)}")
            if not self.mask.any():
                raise ValueError("mask selects no cells")
        self.n_terms = float(self.V.shape[0] * np.count_nonzero(self.mask))
        self.bias = layer.bias.astype(np.float64)
        # Cached im2col of the fixed key patch.
        cols = np.lib.stride_tricks.sliding_window_view(self.K, (kh, kw), axis=(1, 2))
        self._cols = np.ascontiguousarray(
            cols.transpose(1, 2, 0, 3, 4).reshape(vh * vw, -1)
        )
        self._grid = (vh, vw)

    def forward(self, weights64: np.ndarray) -> np.ndarray:
        out_ch = self.layer.out_channels
        vh, vw = self._grid
        pre = (self._cols @ weights64.reshape(out_ch, -1).T).T.reshape(out_ch, vh, vw)
        pre = pre + self.bias[:, None, None]
        return genmodel.apply_nonlinearity(pre, self.layer.nonlinearity)

    def loss(self, weights64: np.ndarray) -> float:
        r = (self.forward(weights64) - self.V) * self.mask
        return float(np.sum(r * r) / self.n_terms)

    def loss_and_grad(self, weights64: np.ndarray) -> tuple[float, np.ndarray]:
        """Returns (loss, gradient in assoc-view matrix layout)."""
        out_ch = self.layer.out_channels
        kh, kw = self.layer.kernel
        vh, vw = self._grid
        pre = (self._cols @ weights64.reshape(out_ch, -1).T).T.reshape(out_ch, vh, vw)
        pre = pre + self.bias[:, None, None]
        out = genmodel.apply_nonlinearity(pre, self.layer.nonlinearity)
        r = (out - self.V) * self.mask
        loss = float(np.sum(r * r) / self.n_terms)
        g_pre = (2.0 / self.n_terms) * r * genmodel.nonlinearity_grad(pre, self.layer.nonlinearity)
        gw = (g_pre.reshape(out_ch, -1) @ self._cols).reshape(
            out_ch, self.layer.in_channels, kh, kw
        )
        return loss, weights_to_matrix(gw)

    def residual_norm(self, weights64: np.ndarray) -> float:
        r = (self.forward(weights64) - self.V) * self.mask
        return float(np.linalg.norm(r))


def single_key_objective(layer: LayerSpec, k_star, v_star) -> PatchObjective:
    """Objective for one isolated key: other receptive-field keys are zero."""
    kh, kw = layer.kernel
    k = np.asarray(k_star, dtype=np.float64).ravel()
    K_patch = np.zeros((layer.in_channels, 2 * kh - 1, 2 * kw - 1))
    K_patch[:, kh - 1, kw - 1] = k
    V = np.asarray(v_star, dtype=np.float64).reshape(layer.out_channels, kh, kw)
    return PatchObjective(layer, K_patch, V)


def _check_divergence(loss: float, initial: float, t: int) -> None:
    # The absolute floor keeps a near-zero initial loss (already-satisfied
    # target) from turning the optimizer's first exploratory steps into a
    # false divergence.
    if not np.isfinite(loss) or loss > 1e6 * (initial + 1e-6):
        raise DivergenceError(
            f"loss {loss:.3e} diverged from initial {initial:.3e} at iteration {t}", t
        )


def _optimize_lambda(objective: PatchObjective, D: np.ndarray, cfg: OptimConfig, progress=None):
    layer = objective.layer
    w0 = as_assoc_view(layer).matrix
    out_ch, in_ch = layer.out_channels, layer.in_channels
    kh, kw = layer.kernel
    lam = np.zeros((w0.shape[0], D.shape[1]))
    opt = _Optimizer(cfg.optimizer, cfg.learning_rate, lam.shape)
    trace = np.empty(cfg.iterations)
    start = time.perf_counter()
    initial = None
    for t in range(cfg.iterations):
        w_mat = w0 + lam @ D.T
        weights = _matrix_to_weights64(w_mat, out_ch, in_ch, kh, kw)
        loss, g_mat = objective.loss_and_grad(weights)
        trace[t] = loss
        if initial is None:
            initial = loss
        _check_divergence(loss, initial, t)
        if progress is not None and t % 50 == 0:
            progress(t, loss)
        lam = opt.step(lam, g_mat @ D)
    w_final = w0 + lam @ D.T
    weights = _matrix_to_weights64(w_final, out_ch, in_ch, kh, kw)
    return EditResult(
        loss_trace=trace,
        constraint_residual=objective.residual_norm(weights),
        wall_time=time.perf_counter() - start,
        config=cfg,
        view=AssocView(w_final, out_ch, (kh, kw)),
        lam=lam,
        delta_matrix=lam @ D.T,
    )


def optimize_lambda_single(
    layer: LayerSpec, k_star, v_star, d, cfg: OptimConfig | None = None
) -> EditResult:
    """Fit W0 + Lambda d^T so the layer maps k* to the target patch v*.

    The update stays on the rank-one line spanned by d^T by construction;
    only the M coefficients Lambda are optimized.
    """
    cfg = cfg or OptimConfig()
    d = np.asarray(d, dtype=np.float64).ravel()
    if not np.any(d):
        raise ValueError("update direction d is zero")
    objective = single_key_objective(layer, k_star, v_star)
    result = _optimize_lambda(objective, d[:, None], cfg)
    result.lam = result.lam[:, 0]
    return result


def optimize_lambda_multi(
    layer: LayerSpec,
    K_star,
    V_star,
    directions: DirectionSet,
    cfg: OptimConfig | None = None,
    mask=None,
    progress=None,
) -> EditResult:
    """Fit W0 + Lambda D_S^T over a feature-map patch.

    K_star is the conv-input patch covering V_star's receptive field; the
    delta's row space is confined to span(D_S), so rank(W - W0) <= S.
    """
    cfg = cfg or OptimConfig()
    objective = PatchObjective(layer, K_star, V_star, mask=mask)
    return _optimize_lambda(objective, directions.matrix, cfg, progress=progress)


def _row_space_projector(D: np.ndarray) -> np.ndarray:
    # Orthogonal projector onto span(D)'s columns, applied to delta rows.
    return D @ np.linalg.pinv(D)


def projected_gd(
    layer: LayerSpec,
    K_star,
    V_star,
    subspace: DirectionSet | None,
    cfg: OptimConfig | None = None,
    mask=None,
    progress=None,
) -> EditResult:
    """Free-weight optimization with periodic projection onto the subspace.

    Every `project_every` iterations (and once more after the loop) the
    accumulated delta's rows are projected onto span(subspace); with a
    full-rank or absent subspace no projection is applied and this is plain
    unconstrained descent on the layer weights.

    Defaults to the plain-gradient optimizer: the adaptive optimizer's
    per-coordinate scaling shifts the fixed point of the
    project-then-step iteration away from the constrained optimum, while
    plain projected descent converges to it exactly.
    """
    cfg = cfg or OptimConfig(optimizer="plain_gd")
    objective = PatchObjective(layer, K_star, V_star, mask=mask)
    w0 = as_assoc_view(layer).matrix
    out_ch, in_ch = layer.out_channels, layer.in_channels
    kh, kw = layer.kernel
    P = None
    if subspace is not None and subspace.rank < in_ch:
        P = _row_space_projector(subspace.matrix)
    w = w0.copy()
    opt = _Optimizer(cfg.optimizer, cfg.learning_rate, w.shape)
    trace = np.empty(cfg.iterations)
    start = time.perf_counter()
    initial = None
    for t in range(cfg.iterations):
        weights = _matrix_to_weights64(w, out_ch, in_ch, kh, kw)
        loss, g_mat = objective.loss_and_grad(weights)
        trace[t] = loss
        if initial is None:
            initial = loss
        _check_divergence(loss, initial, t)
        if progress is not None and t % 50 == 0:
            progress(t, loss)
        w = opt.step(w, g_mat)
        if P is not None and (t + 1) % cfg.project_every == 0:
            w = w0 + (w - w0) @ P
    if P is not None:
        w = w0 + (w - w0) @ P
    weights = _matrix_to_weights64(w, out_ch, in_ch, kh, kw)
    return EditResult(
        loss_trace=trace,
        constraint_residual=objective.residual_norm(weights),
        wall_time=time.perf_counter() - start,
        config=cfg,
        view=AssocView(w, out_ch, (kh, kw)),
        delta_matrix=w - w0,
    )


def finetune_layer_unconstrained(
    gen: Generator, L: int, K_star, V_star, cfg: OptimConfig | None = None, mask=None
) -> EditResult:
    """Baseline: fit all entries of layer L's weights to the target patch."""
    layer = gen.layers[L - 1]
    return projected_gd(layer, K_star, V_star, subspace=None, cfg=cfg, mask=mask)


def zero_units(layer: LayerSpec, unit_indices) -> LayerSpec:
    """Baseline ablation: zero whole output channels (weights and bias)."""
    idx = np.asarray(list(unit_indices), dtype=int)
    if idx.size == 0:
        return layer
    if idx.min() < 0 or idx.max() >= layer.out_channels:
        raise ValueError(
            f"unit index out of range 0..{layer.out_channels - 1}: {idx.tolist()}"
        )
    w = layer.weights.copy()
    b = layer.bias.copy()
    w[idx] = 0.0
    b[idx] = 0.0
    return LayerSpec(w, b, nonlinearity=layer.nonlinearity, upsample=layer.upsample)


# ---------------------------------------------------------------------------
# Whole-network optimization (image-space losses).
# ---------------------------------------------------------------------------


def _latent_maps(gen: Generator, zs, dtype=np.float64) -> np.ndarray:
    zs = np.asarray(zs, dtype=dtype)
    if zs.ndim == 1:
        zs = zs[None, :]
    return np.ascontiguousarray(
        np.broadcast_to(
            zs[:, :, None, None], (zs.shape[0], gen.latent_dim, gen.base_size, gen.base_size)
        )
    )


def _im2col_batch(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, C, H, W), 'same' padding -> (B*H*W, C*kh*kw) window matrix."""
    bsz, c, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(
        cols.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * h * w, c * kh * kw)
    )


def _forward_cached(layers, z_maps):
    """Batched forward caching the im2col matrices for the backward pass.

    Returns (outputs, cache) where cache[i] = (cols, pre, grid shape).
    """
    x = z_maps
    dtype = z_maps.dtype
    cache = []
    for layer in layers:
        k = genmodel.upsample_nearest_batch(x, layer.upsample)
        bsz, c, h, w = k.shape
        kh, kw = layer.kernel
        cols = _im2col_batch(k, kh, kw)
        w_mat = layer.weights.reshape(layer.out_channels, -1).T.astype(dtype)
        pre = (cols @ w_mat + layer.bias.astype(dtype)).reshape(bsz, h, w, layer.out_channels)
        pre = np.ascontiguousarray(pre.transpose(0, 3, 1, 2))
        x = genmodel.apply_nonlinearity(pre, layer.nonlinearity)
        cache.append((cols, pre, (bsz, h, w)))
    return x, cache


def _backprop(layers, cache, grad_out, stop_layer: int):
    """Backprop batched grad_out to every layer index >= stop_layer (1-based).

    Returns dict layer_index -> (grad_weights, grad_bias), summed over batch.
    """
    dtype = grad_out.dtype
    grads = {}
    g = grad_out
    for i in range(len(layers), 0, -1):
        layer = layers[i - 1]
        cols, pre, (bsz, h, w) = cache[i - 1]
        out_ch = layer.out_channels
        kh, kw = layer.kernel
        g_pre = g * genmodel.nonlinearity_grad(pre, layer.nonlinearity)
        g2 = g_pre.transpose(0, 2, 3, 1).reshape(bsz * h * w, out_ch)
        grads[i] = (
            (g2.T @ cols).reshape(out_ch, layer.in_channels, kh, kw),
            g2.sum(axis=0),
        )
        if i == stop_layer:
            break
        w_flip = np.ascontiguousarray(
            layer.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).astype(dtype)
        )
        gx = genmodel.conv2d_batch(np.ascontiguousarray(g_pre), w_flip)
        g = genmodel.downsample_sum_batch(gx, layer.upsample)
    return grads


@dataclass
class DiscoveryResult:
    best_layer: int
    delta_weights: np.ndarray  # float32 conv tensor for the best layer
    per_layer_losses: list[float]
    generator: Generator


def rank_constrained_discovery(
    gen: Generator, pairs, rank: int, cfg: OptimConfig | None = None
) -> DiscoveryResult:
    """Find the layer where a rank-limited change best explains the targets.

    Each pair is (latent, target image, image mask); the loss is the masked
    image error.  A free delta is optimized per candidate layer with an SVD
    truncation to `rank` every `project_every` iterations and once after
    the loop; the layer with the lowest final loss wins.
    """
    cfg = cfg or OptimConfig()
    if rank < 1:
        raise ValueError("rank must be >= 1")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one training pair")
    zs, targets, masks, n_terms = [], [], [], []
    for i, (z, target, mask) in enumerate(pairs):
        target = np.asarray(target, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != target.shape[1:]:
            raise ValueError(f"pair {i}: mask shape {mask.shape} != image grid {target.shape[1:]}")
        if not mask.any():
            raise ValueError(f"pair {i}: mask selects no pixels")
        zs.append(np.asarray(z, dtype=np.float64).ravel())
        targets.append(target)
        masks.append(mask)
        n_terms.append(float(target.shape[0] * mask.sum()))
    prepared = (
        _latent_maps(gen, np.stack(zs), np.float32),
        np.stack(targets).astype(np.float32),
        np.stack(masks)[:, None, :, :].astype(np.float32),
        np.asarray(n_terms, dtype=np.float32),
    )

    losses: list[float] = []
    best = None
    for L in range(1, gen.n_layers + 1):
        try:
            loss, w_mat = _optimize_layer_image_loss(gen, L, prepared, rank, cfg)
        except DivergenceError:
            losses.append(float("inf"))
            continue
        losses.append(loss)
        if best is None or loss < best[0]:
            best = (loss, L, w_mat)
    if best is None:
        raise DivergenceError("every candidate layer diverged", cfg.iterations)
    _, best_layer, w_mat = best
    layer = gen.layers[best_layer - 1]
    kh, kw = layer.kernel
    new_weights = matrix_to_weights(w_mat, layer.out_channels, layer.in_channels, kh, kw)
    delta = new_weights - layer.weights
    new_gen = gen.replace_layer(
        best_layer,
        LayerSpec(new_weights, layer.bias, layer.nonlinearity, layer.upsample),
    )
    return DiscoveryResult(best_layer, delta, losses, new_gen)


def _masked_image_loss(layers, prepared):
    z_maps, targets, masks, n_terms = prepared
    out, _ = _forward_cached(layers, z_maps)
    r = (out - targets) * masks
    per_pair = np.sum(r * r, axis=(1, 2, 3)) / n_terms
    return float(per_pair.mean())


def _optimize_layer_image_loss(gen: Generator, L: int, prepared, rank: int, cfg: OptimConfig):
    layer = gen.layers[L - 1]
    out_ch, in_ch = layer.out_channels, layer.in_channels
    kh, kw = layer.kernel
    w0 = as_assoc_view(layer).matrix
    w = w0.copy()
    opt = _Optimizer(cfg.optimizer, cfg.learning_rate, w.shape)
    initial = None
    z_maps, targets, masks, n_terms = prepared
    n_pairs = z_maps.shape[0]
    for t in range(cfg.iterations):
        weights32 = matrix_to_weights(w, out_ch, in_ch, kh, kw)
        layers = list(gen.layers)
        layers[L - 1] = LayerSpec(weights32, layer.bias, layer.nonlinearity, layer.upsample)
        out, cache = _forward_cached(layers, z_maps)
        r = (out - targets) * masks
        per_pair = np.sum(r * r, axis=(1, 2, 3)) / n_terms
        loss = float(per_pair.mean())
        grad_out = (2.0 / n_pairs) * r / n_terms[:, None, None, None]
        grads = _backprop(layers, cache, grad_out, stop_layer=L)
        g_mat = weights_to_matrix(grads[L][0])
        if initial is None:
            initial = loss
        _check_divergence(loss, initial, t)
        w = opt.step(w, g_mat)
        if (t + 1) % cfg.project_every == 0:
            w = w0 + linalg.svd_truncate(w - w0, rank)
    w = w0 + linalg.svd_truncate(w - w0, rank)
    weights32 = matrix_to_weights(w, out_ch, in_ch, kh, kw)
    layers = list(gen.layers)
    layers[L - 1] = LayerSpec(weights32, layer.bias, layer.nonlinearity, layer.upsample)
    return _masked_image_loss(layers, prepared), w


def finetune_all(
    gen: Generator,
    exemplars,
    lam_weight: float = 1.0,
    cfg: OptimConfig | None = None,
    batch_size: int = 4,
) -> EditResult:
    """Baseline: fine-tune every weight and bias on image-space losses.

    Loss per step is the drift term (mean squared image change on a fresh
    seeded latent batch) plus `lam_weight` times the constraint term (mean
    squared error against each exemplar target).  Typical usage passes a
    1e-4 learning rate.
    """
    cfg = cfg or OptimConfig(learning_rate=1e-4)
    dtype = np.float32
    ex_z = [np.asarray(z, dtype=dtype).ravel() for z, _ in exemplars]
    ex_x = [np.asarray(x, dtype=dtype) for _, x in exemplars]
    n_ex = len(ex_z)
    layers = list(gen.layers)
    ref_layers = list(gen.layers)
    fresh = genmodel.sample_latents(cfg.seed, batch_size * cfg.iterations, gen.latent_dim)
    opts = [
        (
            _Optimizer(cfg.optimizer, cfg.learning_rate, l.weights.shape),
            _Optimizer(cfg.optimizer, cfg.learning_rate, l.bias.shape),
        )
        for l in layers
    ]
    # Per-sample loss weights: the fresh batch estimates the drift
    # expectation, exemplars carry lam_weight each.
    weights_per_sample = np.concatenate(
        [np.full(batch_size, 1.0 / batch_size), np.full(n_ex, lam_weight)]
    ).astype(dtype)
    ex_maps = _latent_maps(gen, np.stack(ex_z), dtype) if n_ex else None
    # Drift references depend only on the frozen weights; render them all
    # up front in chunks.
    ref_chunks = []
    for c0 in range(0, fresh.shape[0], 512):
        maps = _latent_maps(gen, fresh[c0:c0 + 512], dtype)
        out, _ = _forward_cached(ref_layers, maps)
        ref_chunks.append(out.astype(dtype))
    references = np.concatenate(ref_chunks, axis=0)
    trace = np.empty(cfg.iterations)
    start = time.perf_counter()
    initial = None
    constraint_part = 0.0
    for t in range(cfg.iterations):
        batch = fresh[t * batch_size:(t + 1) * batch_size]
        batch_maps = _latent_maps(gen, batch, dtype)
        batch_refs = references[t * batch_size:(t + 1) * batch_size]
        if n_ex:
            z_maps = np.concatenate([batch_maps, ex_maps], axis=0)
            targets = np.concatenate([batch_refs, np.stack(ex_x)], axis=0)
        else:
            z_maps, targets = batch_maps, batch_refs
        out, cache = _forward_cached(layers, z_maps)
        r = out - targets
        n_terms = float(targets[0].size)
        per_sample = np.sum(r * r, axis=(1, 2, 3)) / n_terms
        loss = float(per_sample @ weights_per_sample)
        constraint_part = float(per_sample[batch_size:].sum())
        grad_out = (2.0 / n_terms) * r * weights_per_sample[:, None, None, None]
        grads = _backprop(layers, cache, grad_out, stop_layer=1)
        trace[t] = loss
        if initial is None:
            initial = loss
        _check_divergence(loss, initial, t)
        for i, layer in enumerate(layers):
            w_opt, b_opt = opts[i]
            gw, gb = grads[i + 1]
            new_w = w_opt.step(layer.weights.astype(np.float64), gw)
            new_b = b_opt.step(layer.bias.astype(np.float64), gb)
            layers[i] = LayerSpec(new_w, new_b, layer.nonlinearity, layer.upsample)
    new_gen = Generator(gen.latent_dim, tuple(layers), gen.base_size, gen.output_channels)
    return EditResult(
        loss_trace=trace,
        constraint_residual=float(constraint_part),
        wall_time=time.perf_counter() - start,
        config=cfg,
        generator=new_gen,
    )
