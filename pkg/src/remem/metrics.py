"""Desk-scale evaluation: layer selection, undesired-change, and efficacy.

The layer-selection score compares pixel statistics of patches rendered in
isolation against same-sized crops of full renders; layers storing largely
independent per-location rules score low and are the good editing targets.
Gaussian statistics on raw pixels stand in for learned embedding
statistics, so only orderings across layers are meaningful, not absolute
values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import genmodel, linalg
from .genmodel import Generator, PlantedManifest

__all__ = [
    "LayerReport",
    "pixel_set_distance",
    "patch_independence_score",
    "masked_change",
    "efficacy_planted_rule",
    "layer_selection_report",
    "save_contact_sheet",
]

_COV_LOADING = 1e-3


def _gaussian_stats(crops: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = crops.reshape(crops.shape[0], -1).astype(np.float64)
    mu = flat.mean(axis=0)
    centered = flat - mu
    cov = centered.T @ centered / max(1, flat.shape[0] - 1)
    cov += _COV_LOADING * np.eye(cov.shape[0])
    return mu, cov


def pixel_set_distance(crops_a: np.ndarray, crops_b: np.ndarray) -> float:
    """Gaussian Frechet distance between two sets of equal-shaped crops."""
    a = np.asarray(crops_a)
    b = np.asarray(crops_b)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"crop shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    mu1, cov1 = _gaussian_stats(a)
    mu2, cov2 = _gaussian_stats(b)
    return linalg.frechet_gaussian(mu1, cov1, mu2, cov2)


def default_crop_size(gen: Generator, L: int) -> int:
    """Image-space footprint of one layer-L kernel patch."""
    kh, kw = gen.layers[L - 1].kernel
    return max(kh, kw) * genmodel.image_scale_after(gen, L)


def _crop_at(image: np.ndarray, cy: int, cx: int, size: int) -> np.ndarray:
    h, w = image.shape[1:]
    y0 = min(max(0, cy - size // 2), h - size)
    x0 = min(max(0, cx - size // 2), w - size)
    return image[:, y0:y0 + size, x0:x0 + size]


def patch_independence_score(
    gen: Generator, L: int, n_samples: int, crop: int | None = None, seed: int = 0
) -> float:
    """How much layer-L patches depend on their neighbors.

    Renders one random location per sample in isolation and compares the
    pixel statistics of those crops against random same-sized crops of
    full renders; lower means the layer's locations render independently.
    """
    if crop is None:
        crop = default_crop_size(gen, L)
    probe = genmodel.forward(gen, np.zeros(gen.latent_dim, dtype=np.float32))
    H, W = probe.shape[1:]
    crop = min(crop, H, W)
    if crop < 1:
        raise ValueError("crop must be at least one pixel")
    scale = genmodel.image_scale_after(gen, L)
    rng = np.random.Generator(np.random.Philox(key=seed ^ 0xC0FFEE))
    latents = genmodel.sample_latents(seed, n_samples, gen.latent_dim)
    isolated, full = [], []
    for z in latents:
        _, v_map = genmodel.features(gen, z, L)
        loc = (int(rng.integers(v_map.height)), int(rng.integers(v_map.width)))
        iso = genmodel.render_isolated_patch(gen, v_map, loc, L)
        cy = loc[0] * scale + scale // 2
        cx = loc[1] * scale + scale // 2
        isolated.append(_crop_at(iso, cy, cx, crop))
        whole = genmodel.forward(gen, z)
        cy = int(rng.integers(H))
        cx = int(rng.integers(W))
        full.append(_crop_at(whole, cy, cx, crop))
    return pixel_set_distance(np.stack(isolated), np.stack(full))


def masked_change(before, after, masks) -> dict:
    """Per-image RMS pixel difference outside the masks.

    Returns {"mean", "max", "per_image"}; masks flag the region that was
    meant to change, so an all-true mask leaves nothing to measure and is
    rejected.
    """
    before = list(before)
    after = list(after)
    masks = list(masks)
    if not (len(before) == len(after) == len(masks)):
        raise ValueError("before/after/masks must have matching lengths")
    per_image = []
    for i, (b, a, m) in enumerate(zip(before, after, masks)):
        b = np.asarray(b, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        m = np.asarray(m, dtype=bool)
        if m.shape != b.shape[1:]:
            raise ValueError(f"image {i}: mask shape {m.shape} != image grid {b.shape[1:]}")
        outside = ~m
        if not outside.any():
            raise ValueError(f"image {i}: mask covers everything; off-mask change undefined")
        diff = (a - b)[:, outside]
        per_image.append(float(np.sqrt(np.mean(diff * diff))))
    return {
        "mean": float(np.mean(per_image)),
        "max": float(np.max(per_image)),
        "per_image": per_image,
    }


def efficacy_planted_rule(
    gen_before: Generator,
    gen_after: Generator,
    manifest: PlantedManifest,
    n: int,
    seed: int = 4242,
) -> float:
    """Fraction of planted-rule locations flipped to the edited motif.

    Over n fresh latents, a rule location counts as flipped when the
    rendered crop is strictly closer (L2) to the after-edit reference crop
    than to the before-edit one; references come from the rule's own
    latent.
    """
    if not manifest.rules:
        raise ValueError("manifest has no rules")
    refs = []
    for rule in manifest.rules:
        y0, y1, x0, x1 = rule.image_box
        old = genmodel.forward(gen_before, rule.z)[:, y0:y1, x0:x1]
        new = genmodel.forward(gen_after, rule.z)[:, y0:y1, x0:x1]
        refs.append((rule, old, new))
    flipped = 0
    total = 0
    for z in genmodel.sample_latents(seed, n, gen_before.latent_dim):
        rendered = genmodel.forward(gen_after, z)
        for rule, old, new in refs:
            y0, y1, x0, x1 = rule.image_box
            crop = rendered[:, y0:y1, x0:x1]
            if np.linalg.norm(crop - new) < np.linalg.norm(crop - old):
                flipped += 1
            total += 1
    return flipped / total


@dataclass(frozen=True)
class LayerReport:
    """Per-layer patch-independence scores with an editing recommendation."""

    scores: tuple[float, ...]
    recommended: tuple[int, ...]  # 1-based layer indices with score <= median
    n_samples: int
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "scores": {str(i + 1): s for i, s in enumerate(self.scores)},
            "recommended_layers": list(self.recommended),
            "n_samples": self.n_samples,
            "seed": self.seed,
        }

    def format_table(self) -> str:
        lines = ["layer  independence-score  recommended"]
        for i, s in enumerate(self.scores, start=1):
            mark = "yes" if i in self.recommended else ""
            lines.append(f"{i:>5}  {s:>18.6f}  {mark}")
        return "\n".join(lines)


def layer_selection_report(gen: Generator, n_samples: int, seed: int = 0) -> LayerReport:
    """Score every layer and recommend those at or below the median."""
    scores = tuple(
        patch_independence_score(gen, L, n_samples, seed=seed)
        for L in range(1, gen.n_layers + 1)
    )
    median = float(np.median(scores))
    recommended = tuple(i + 1 for i, s in enumerate(scores) if s <= median)
    return LayerReport(scores=scores, recommended=recommended, n_samples=n_samples, seed=seed)


def save_contact_sheet(crops, path, columns: int = 8) -> None:
    """Tile image crops into one PNG for eyeballing isolated vs full sets."""
    crops = [np.asarray(c) for c in crops]
    if not crops:
        raise ValueError("no crops to save")
    ch, h, w = crops[0].shape
    rows = (len(crops) + columns - 1) // columns
    sheet = -np.ones((ch, rows * (h + 1) - 1, columns * (w + 1) - 1), dtype=np.float32)
    for i, c in enumerate(crops):
        r, col = divmod(i, columns)
        sheet[:, r * (h + 1):r * (h + 1) + h, col * (w + 1):col * (w + 1) + w] = c
    genmodel.save_png(sheet, path)
