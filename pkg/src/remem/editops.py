"""Turn Copy/Paste/Context gestures into (K*, V*, D_S) and run a model edit.

A session records the user's three gestures against a generator: a copied
region (which features to reproduce), a paste placement (which keys should
produce them), and context selections (where the change should
generalize).  apply_edit compiles those into the patch optimization and
returns a new generator; the source generator is never mutated.

Sessions serialize to versioned JSON with run-length-encoded masks, and
identical sessions replay to bit-identical generators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import assocmem, genmodel, rankreduce, rewrite
from .genmodel import Generator, LayerSpec
from .rewrite import EditResult, OptimConfig

SESSION_VERSION = 1

__all__ = [
    "RegionMask",
    "EditSession",
    "EditError",
    "EditApplication",
    "encode_rle",
    "decode_rle",
    "downsample_mask",
    "extract_copy_value",
    "make_paste_target",
    "collect_context_keys",
    "apply_edit",
    "context_relevance",
    "session_to_dict",
    "session_from_dict",
    "save_session",
    "load_session",
]


class EditError(RuntimeError):
    """Failure in one stage of the edit pipeline, annotated with the stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RegionMask:
    """A brushed region on one generated sample (image resolution)."""

    seed: int
    grid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=bool)
        if g.ndim != 2:
            raise ValueError(f"mask grid must be 2-D, got {g.shape}")
        object.__setattr__(self, "grid", g)

    def latent(self, gen: Generator) -> np.ndarray:
        return genmodel.sample_latents(self.seed, 1, gen.latent_dim)[0]


@dataclass(frozen=True)
class EditSession:
    """Serialized form of one Copy/Paste/Context edit."""

    layer: int
    copy: RegionMask
    paste_seed: int
    paste_offset: tuple[int, int]  # layer-grid cell of the pasted box's top-left
    context: tuple[RegionMask, ...] = ()
    rank: int = 1
    config: OptimConfig = field(default_factory=OptimConfig)
    method: str = "lambda"  # or "projected_gd"
    loss_outside_mask: str = "masked"  # or "full": fill off-mask box cells
    stats_samples: int = 128
    stats_seed: int = 100
    model: str | None = None  # path of the generator fixture, if file-backed
    render_seeds: tuple[int, ...] = ()

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.method not in ("lambda", "projected_gd"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.loss_outside_mask not in ("masked", "full"):
            raise ValueError(f"unknown loss_outside_mask {self.loss_outside_mask!r}")
        if not self.copy.grid.any():
            raise ValueError("copy mask selects nothing")
        object.__setattr__(self, "context", tuple(self.context))
        object.__setattr__(self, "paste_offset", tuple(self.paste_offset))
        object.__setattr__(self, "render_seeds", tuple(self.render_seeds))
        for i, m in enumerate(self.context):
            if not m.grid.any():
                raise ValueError(f"context mask {i} selects nothing")


def encode_rle(grid: np.ndarray) -> dict:
    """Run-length encode a boolean grid, row-major, starting with a
    false-run (possibly zero-length)."""
    g = np.asarray(grid, dtype=bool).ravel()
    runs = []
    current = False
    count = 0
    for v in g:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current = not current
            count = 1
    runs.append(count)
    return {"shape": list(np.asarray(grid).shape), "runs": runs}


def decode_rle(payload: dict) -> np.ndarray:
    shape = tuple(payload["shape"])
    runs = payload["runs"]
    total = int(np.prod(shape))
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if run < 0 or pos + run > total:
            raise ValueError("run-length data does not fit the declared shape")
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != total:
        raise ValueError(f"run-length data covers {pos} cells, expected {total}")
    return flat.reshape(shape)


def downsample_mask(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Reduce an image-resolution mask to a layer grid.

    A cell is on when at least half of its image footprint is masked; if
    that empties the mask, the single best-covered cell is forced on.
    """
    g = np.asarray(grid, dtype=bool)
    h, w = target
    H, W = g.shape
    if H % h or W % w:
        raise ValueError(f"grid {h}x{w} does not divide image {H}x{W}")
    fy, fx = H // h, W // w
    coverage = g.reshape(h, fy, w, fx).mean(axis=(1, 3))
    cells = coverage >= 0.5
    if not cells.any():
        if not g.any():
            raise ValueError("mask selects nothing")
        cells = np.zeros_like(cells)
        best = np.unravel_index(np.argmax(coverage), coverage.shape)
        cells[best] = True
    return cells


def _bounding_box(cells: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(cells)
    return int(ys.min()), int(xs.min()), int(ys.max() - ys.min() + 1), int(xs.max() - xs.min() + 1)


def _key_patch(gen: Generator, z, L: int, offset: tuple[int, int], box_shape: tuple[int, int]):
    """Conv-input patch covering a box plus its kernel margin.

    The margin outside the feature grid is zero, exactly matching what the
    padded convolution sees at the border.
    """
    bh, bw = box_shape
    k_map, _ = genmodel.features(gen, z, L)
    oy, ox = offset
    if not (0 <= oy <= k_map.height - bh and 0 <= ox <= k_map.width - bw):
        raise ValueError(
            f"paste box {bh}x{bw} at offset ({oy}, {ox}) leaves the "
            f"{k_map.height}x{k_map.width} feature grid"
        )
    kh, kw = gen.layers[L - 1].kernel
    ry, rx = (kh - 1) // 2, (kw - 1) // 2
    patch = np.zeros((k_map.channels, bh + 2 * ry, bw + 2 * rx))
    src_y0, src_y1 = max(0, oy - ry), min(k_map.height, oy + bh + ry)
    src_x0, src_x1 = max(0, ox - rx), min(k_map.width, ox + bw + rx)
    dst_y0 = src_y0 - (oy - ry)
    dst_x0 = src_x0 - (ox - rx)
    patch[:, dst_y0:dst_y0 + (src_y1 - src_y0), dst_x0:dst_x0 + (src_x1 - src_x0)] = (
        k_map.data[:, src_y0:src_y1, src_x0:src_x1].astype(np.float64)
    )
    return patch


def extract_copy_value(gen: Generator, session: EditSession):
    """Copied layer-L features: (V_star, box, cell_mask).

    V_star covers the downsampled mask's bounding box; cell_mask flags
    which box cells were actually brushed (the loss is restricted to them
    unless the session says otherwise).  The values are evaluated through
    the same double-precision patch computation the optimizer uses, so
    pasting a region onto identical keys is an exact no-op.
    """
    z = session.copy.latent(gen)
    _, v_map = genmodel.features(gen, z, session.layer)
    cells = downsample_mask(session.copy.grid, (v_map.height, v_map.width))
    y0, x0, bh, bw = _bounding_box(cells)
    layer = gen.layers[session.layer - 1]
    k_patch = _key_patch(gen, z, session.layer, (y0, x0), (bh, bw))
    objective = rewrite.PatchObjective(layer, k_patch, np.zeros((layer.out_channels, bh, bw)))
    v_star = objective.forward(layer.weights.astype(np.float64))
    cell_mask = cells[y0:y0 + bh, x0:x0 + bw]
    return v_star, (y0, x0, bh, bw), cell_mask


def make_paste_target(gen: Generator, session: EditSession, box_shape: tuple[int, int]):
    """Key patch under the paste placement, including the conv margin."""
    z = genmodel.sample_latents(session.paste_seed, 1, gen.latent_dim)[0]
    return _key_patch(gen, z, session.layer, session.paste_offset, box_shape)


def collect_context_keys(gen: Generator, session: EditSession) -> rankreduce.ContextSelection:
    """One key column per on-cell per context mask.

    Without context masks, falls back to the keys under the paste box (a
    single-image direction constraint).
    """
    L = session.layer
    columns = []
    sources = []
    if session.context:
        for m in session.context:
            k_map, _ = genmodel.features(gen, m.latent(gen), L)
            cells = downsample_mask(m.grid, (k_map.height, k_map.width))
            for y, x in zip(*np.nonzero(cells)):
                columns.append(k_map.data[:, y, x].astype(np.float64))
                sources.append((m.seed, (int(y), int(x))))
    else:
        z = genmodel.sample_latents(session.paste_seed, 1, gen.latent_dim)[0]
        k_map, _ = genmodel.features(gen, z, L)
        _, _, cell_mask = extract_copy_value(gen, session)
        oy, ox = session.paste_offset
        for y, x in zip(*np.nonzero(cell_mask)):
            columns.append(k_map.data[:, oy + y, ox + x].astype(np.float64))
            sources.append((session.paste_seed, (int(oy + y), int(ox + x))))
    return rankreduce.ContextSelection(
        keys=np.stack(columns, axis=1), sources=tuple(sources)
    )


@dataclass
class EditApplication:
    """Everything a caller needs from one applied edit."""

    generator: Generator
    result: EditResult
    directions: rankreduce.DirectionSet
    before_renders: dict[int, np.ndarray]
    after_renders: dict[int, np.ndarray]
    generator_hash: str


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, EditError):
                raise EditError(name, exc) from exc
            return False

    return _Ctx()


def apply_edit(
    gen: Generator,
    session: EditSession,
    stats: assocmem.KeyStats | None = None,
    progress=None,
) -> EditApplication:
    """Run the full edit pipeline; the input generator is left untouched."""
    L = session.layer
    layer = gen.layers[L - 1]
    with _stage("key statistics"):
        if stats is None:
            stats = assocmem.estimate_key_stats(
                gen, L, n_samples=session.stats_samples, seed=session.stats_seed
            )
    with _stage("copy extraction"):
        v_star, box, cell_mask = extract_copy_value(gen, session)
    with _stage("paste placement"):
        k_star = make_paste_target(gen, session, (box[2], box[3]))
    with _stage("context collection"):
        selection = collect_context_keys(gen, session)
    with _stage("rank reduction"):
        directions = rankreduce.reduce_context(selection.keys, stats, session.rank)
    mask = cell_mask if session.loss_outside_mask == "masked" else None
    with _stage("optimization"):
        if session.method == "lambda":
            result = rewrite.optimize_lambda_multi(
                layer, k_star, v_star, directions, session.config, mask=mask,
                progress=progress,
            )
        else:
            result = rewrite.projected_gd(
                layer, k_star, v_star, directions, session.config, mask=mask,
                progress=progress,
            )
    with _stage("weight reshape"):
        new_layer = LayerSpec(
            assocmem.to_layer(result.view),
            layer.bias,
            layer.nonlinearity,
            layer.upsample,
        )
        new_gen = gen.replace_layer(L, new_layer)
    with _stage("rendering"):
        before, after = {}, {}
        for seed in session.render_seeds:
            z = genmodel.sample_latents(seed, 1, gen.latent_dim)[0]
            before[seed] = genmodel.forward(gen, z)
            after[seed] = genmodel.forward(new_gen, z)
    return EditApplication(
        generator=new_gen,
        result=result,
        directions=directions,
        before_renders=before,
        after_renders=after,
        generator_hash=genmodel.generator_hash(new_gen),
    )


def context_relevance(
    gen: Generator, L: int, directions: rankreduce.DirectionSet, seeds
) -> dict[int, float]:
    """Max-location response |D_S^T k| per sample seed; higher = more
    relevant to the context selection."""
    out = {}
    D = directions.matrix
    for seed in seeds:
        z = genmodel.sample_latents(int(seed), 1, gen.latent_dim)[0]
        k_map, _ = genmodel.features(gen, z, L)
        resp = np.tensordot(D.T, k_map.data.astype(np.float64), axes=(1, 0))
        out[int(seed)] = float(np.max(np.linalg.norm(resp, axis=0)))
    return out


# ---------------------------------------------------------------------------
# Session (de)serialization.
# ---------------------------------------------------------------------------


def _mask_to_dict(m: RegionMask) -> dict:
    return {"seed": m.seed, "mask": encode_rle(m.grid)}


def _mask_from_dict(d: dict) -> RegionMask:
    return RegionMask(seed=int(d["seed"]), grid=decode_rle(d["mask"]))


def session_to_dict(session: EditSession) -> dict:
    cfg = session.config
    return {
        "version": SESSION_VERSION,
        "model": session.model,
        "layer": session.layer,
        "rank": session.rank,
        "method": session.method,
        "loss_outside_mask": session.loss_outside_mask,
        "copy": _mask_to_dict(session.copy),
        "paste": {"seed": session.paste_seed, "offset": list(session.paste_offset)},
        "context": [_mask_to_dict(m) for m in session.context],
        "config": {
            "learning_rate": cfg.learning_rate,
            "iterations": cfg.iterations,
            "project_every": cfg.project_every,
            "optimizer": cfg.optimizer,
            "seed": cfg.seed,
        },
        "stats": {"n_samples": session.stats_samples, "seed": session.stats_seed},
        "render_seeds": list(session.render_seeds),
    }


def session_from_dict(d: dict) -> EditSession:
    version = d.get("version")
    if version != SESSION_VERSION:
        raise ValueError(f"unsupported session version {version!r}")
    cfg = d.get("config", {})
    stats = d.get("stats", {})
    return EditSession(
        layer=int(d["layer"]),
        copy=_mask_from_dict(d["copy"]),
        paste_seed=int(d["paste"]["seed"]),
        paste_offset=tuple(int(v) for v in d["paste"]["offset"]),
        context=tuple(_mask_from_dict(m) for m in d.get("context", [])),
        rank=int(d.get("rank", 1)),
        config=OptimConfig(
            learning_rate=float(cfg.get("learning_rate", 0.05)),
            iterations=int(cfg.get("iterations", 2001)),
            project_every=int(cfg.get("project_every", 10)),
            optimizer=cfg.get("optimizer", "adam_style"),
            seed=int(cfg.get("seed", 0)),
        ),
        method=d.get("method", "lambda"),
        loss_outside_mask=d.get("loss_outside_mask", "masked"),
        stats_samples=int(stats.get("n_samples", 128)),
        stats_seed=int(stats.get("seed", 100)),
        model=d.get("model"),
        render_seeds=tuple(int(s) for s in d.get("render_seeds", [])),
    )


def save_session(session: EditSession, path) -> None:
    with open(path, "w") as f:
        json.dump(session_to_dict(session), f, indent=2, sort_keys=True)


def load_session(path) -> EditSession:
    with open(path) as f:
        return session_from_dict(json.load(f))


def with_model_path(session: EditSession, model: str) -> EditSession:
    return replace(session, model=model)
