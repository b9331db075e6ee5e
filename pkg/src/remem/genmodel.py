"""Minimal convolutional generator with planted-rule fixtures.

A Generator is an ordered list of conv layers (nearest-neighbor upsample,
3x3 zero-padded convolution, bias, pointwise nonlinearity) run on a latent
vector broadcast over a small starting grid.  Weights live in float32 and a
forward pass is deterministic: same latent, same weights, same bits out.

The planted-rule constructor builds a generator whose designated memory
layer stores known key->value associations, so edits against it have
analytic ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import linalg

NONLINEARITIES = ("identity", "relu", "leaky_relu", "tanh")
LEAKY_SLOPE = 0.2

GTF_MAGIC = "GTFv1"
_GTF_SEPARATOR = b"\n\0"


class FixtureError(ValueError):
    """Malformed or truncated fixture container."""


def apply_nonlinearity(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return x
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x >= 0.0, x, LEAKY_SLOPE * x)
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown nonlinearity {kind!r}")


def nonlinearity_grad(pre: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the nonlinearity evaluated at pre-activation `pre`."""
    if kind == "identity":
        return np.ones_like(pre)
    if kind == "relu":
        return (pre > 0.0).astype(pre.dtype)
    if kind == "leaky_relu":
        return np.where(pre >= 0.0, np.asarray(1.0, pre.dtype), np.asarray(LEAKY_SLOPE, pre.dtype))
    if kind == "tanh":
        t = np.tanh(pre)
        return 1.0 - t * t
    raise ValueError(f"unknown nonlinearity {kind!r}")


@dataclass(frozen=True)
class LayerSpec:
    """One conv layer: upsample, 'same'-padded convolution, bias, nonlinearity."""

    weights: np.ndarray  # (out_ch, in_ch, kh, kw) float32
    bias: np.ndarray  # (out_ch,) float32
    nonlinearity: str = "leaky_relu"
    upsample: int = 1

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float32))
        b = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float32))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 4:
            raise ValueError(f"weights must be (out, in, kh, kw), got {w.shape}")
        out_ch, _, kh, kw = w.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel must be odd-sized, got {kh}x{kw}")
        if b.shape != (out_ch,):
            raise ValueError(f"bias shape {b.shape} does not match out_ch {out_ch}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.upsample < 1:
            raise ValueError("upsample factor must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass(frozen=True)
class Generator:
    """Ordered conv layers applied to a latent broadcast over a base grid."""

    latent_dim: int
    layers: tuple[LayerSpec, ...]
    base_size: int = 4
    output_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("generator needs at least one layer")
        ch = self.latent_dim
        for i, layer in enumerate(self.layers):
            if layer.in_channels != ch:
                raise ValueError(
                    f"layer {i + 1} expects {layer.in_channels} input channels, "
                    f"previous layer produces {ch}"
                )
            ch = layer.out_channels
        if ch != self.output_channels:
            raise ValueError(
                f"last layer produces {ch} channels, expected {self.output_channels}"
            )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def replace_layer(self, index: int, layer: LayerSpec) -> "Generator":
        """New generator with layer `index` (1-based) swapped out."""
        _check_layer_index(self, index)
        layers = list(self.layers)
        layers[index - 1] = layer
        return Generator(self.latent_dim, tuple(layers), self.base_size, self.output_channels)


@dataclass(frozen=True)
class FeatureMap:
    layer_index: int
    data: np.ndarray  # (channels, height, width) float32

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", d)
        if d.ndim != 3:
            raise ValueError(f"feature map must be (C, H, W), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature map contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def downsample_sum(g: np.ndarray, factor: int) -> np.ndarray:
    """Adjoint of nearest-neighbor upsampling: sum gradients over each block."""
    if factor == 1:
        return g
    c, h, w = g.shape
    return g.reshape(c, h // factor, factor, w // factor, factor).sum(axis=(2, 4))


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """'Same'-padded stride-1 convolution of (C, H, W) with (O, C, kh, kw)."""
    out_ch, in_ch, kh, kw = weights.shape
    c, h, w = x.shape
    if c != in_ch:
        raise ValueError(f"input has {c} channels, weights expect {in_ch}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # (C, H, W, kh, kw) -> (H*W, C*kh*kw)
    cols = cols.transpose(1, 2, 0, 3, 4).reshape(h * w, c * kh * kw)
    out = cols @ weights.reshape(out_ch, -1).T
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(out.T.reshape(out_ch, h, w))


def conv2d_grads(
    x: np.ndarray, weights: np.ndarray, grad_pre: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a 'same'-padded conv w.r.t. weights, bias and input.

    `grad_pre` is the loss gradient at the pre-nonlinearity output.
    Returns (grad_weights, grad_bias, grad_input).
    """
    out_ch, in_ch, kh, kw = weights.shape
    c, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = cols.transpose(1, 2, 0, 3, 4).reshape(h * w, c * kh * kw)
    g = grad_pre.reshape(out_ch, h * w)
    grad_w = (g @ cols).reshape(out_ch, in_ch, kh, kw)
    grad_b = g.sum(axis=1)
    # Input gradient: full correlation of grad_pre with the flipped kernel,
    # which equals a 'same' conv with weights transposed and flipped.
    w_flip = weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x = conv2d(np.ascontiguousarray(grad_pre), np.ascontiguousarray(w_flip))
    return grad_w, grad_b, grad_x


def conv2d_batch(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Batched 'same'-padded conv of (B, C, H, W) with (O, C, kh, kw)."""
    out_ch, in_ch, kh, kw = weights.shape
    bsz, c, h, w = x.shape
    if c != in_ch:
        raise ValueError(f"input has {c} channels, weights expect {in_ch}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * h * w, c * kh * kw)
    out = cols @ weights.reshape(out_ch, -1).T
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(out.reshape(bsz, h, w, out_ch).transpose(0, 3, 1, 2))


def conv2d_batch_grads(
    x: np.ndarray, weights: np.ndarray, grad_pre: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched version of conv2d_grads; weight/bias grads sum over the batch."""
    out_ch, in_ch, kh, kw = weights.shape
    bsz, c, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * h * w, c * kh * kw)
    g = grad_pre.transpose(0, 2, 3, 1).reshape(bsz * h * w, out_ch)
    grad_w = (g.T @ cols).reshape(out_ch, in_ch, kh, kw)
    grad_b = g.sum(axis=0)
    w_flip = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = conv2d_batch(np.ascontiguousarray(grad_pre), w_flip)
    return grad_w, grad_b, grad_x


def upsample_nearest_batch(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def downsample_sum_batch(g: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return g
    b, c, h, w = g.shape
    return g.reshape(b, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def _check_layer_index(gen: Generator, L: int) -> None:
    if not 1 <= L <= gen.n_layers:
        raise ValueError(f"layer index {L} out of range 1..{gen.n_layers}")


def _check_latent(gen: Generator, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float32).ravel()
    if z.shape[0] != gen.latent_dim:
        raise ValueError(f"latent has length {z.shape[0]}, expected {gen.latent_dim}")
    return z


def _layer_forward(layer: LayerSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run one layer; returns (conv input after upsample, activated output)."""
    k = upsample_nearest(x, layer.upsample)
    pre = conv2d(k, layer.weights, layer.bias)
    return k, apply_nonlinearity(pre, layer.nonlinearity)


def forward(gen: Generator, z: np.ndarray) -> np.ndarray:
    """Generate an image (3, H, W) from latent z."""
    z = _check_latent(gen, z)
    x = np.broadcast_to(z[:, None, None], (gen.latent_dim, gen.base_size, gen.base_size))
    x = np.ascontiguousarray(x)
    for layer in gen.layers:
        _, x = _layer_forward(layer, x)
    return x


def features(gen: Generator, z: np.ndarray, L: int) -> tuple[FeatureMap, FeatureMap]:
    """Key and value maps around layer L.

    k_map is the tensor layer L's convolution consumes (the output of the
    first L-1 layers, after layer L's upsampling), so its grid matches
    v_map, layer L's activated output.  Running layer L on k_map reproduces
    v_map exactly.
    """
    _check_layer_index(gen, L)
    z = _check_latent(gen, z)
    x = np.broadcast_to(z[:, None, None], (gen.latent_dim, gen.base_size, gen.base_size))
    x = np.ascontiguousarray(x)
    k = None
    for i, layer in enumerate(gen.layers[:L], start=1):
        k, x = _layer_forward(layer, x)
    return FeatureMap(L, k), FeatureMap(L, x)


def continue_forward(gen: Generator, v_map: FeatureMap, L: int) -> np.ndarray:
    """Run layers L+1..end on layer L's output."""
    _check_layer_index(gen, L)
    x = v_map.data
    for layer in gen.layers[L:]:
        _, x = _layer_forward(layer, x)
    return x


def render_isolated_patch(
    gen: Generator, v_map: FeatureMap, location: tuple[int, int], L: int
) -> np.ndarray:
    """Render layer L features with everything but one patch zeroed.

    Keeps the kh x kw patch of layer L's kernel footprint centered at
    `location` (clipped at the grid border) and zeroes the rest, then runs
    the remaining layers.
    """
    _check_layer_index(gen, L)
    y, x = location
    c, h, w = v_map.data.shape
    if not (0 <= y < h and 0 <= x < w):
        raise ValueError(f"location {location} outside {h}x{w} feature grid")
    kh, kw = gen.layers[L - 1].kernel
    ry, rx = (kh - 1) // 2, (kw - 1) // 2
    isolated = np.zeros_like(v_map.data)
    y0, y1 = max(0, y - ry), min(h, y + ry + 1)
    x0, x1 = max(0, x - rx), min(w, x + rx + 1)
    isolated[:, y0:y1, x0:x1] = v_map.data[:, y0:y1, x0:x1]
    return continue_forward(gen, FeatureMap(L, isolated), L)


def image_scale_after(gen: Generator, L: int) -> int:
    """Product of the upsample factors of layers after L (feature->image)."""
    _check_layer_index(gen, L)
    scale = 1
    for layer in gen.layers[L:]:
        scale *= layer.upsample
    return scale


def receptive_growth_after(gen: Generator, L: int) -> int:
    """Image-pixel radius the layers after L spread a layer-L cell over."""
    _check_layer_index(gen, L)
    radius = 0
    scale = image_scale_after(gen, L)
    for layer in gen.layers[L:]:
        scale //= layer.upsample
        kh, kw = layer.kernel
        radius += max((kh - 1) // 2, (kw - 1) // 2) * scale
    return radius


# ---------------------------------------------------------------------------
# Latent sampling.
#
# Cross-language reproducible PRNG: SplitMix64.  The i-th raw word (i >= 1)
# is mix(seed + i * 0x9E3779B97F4A7C15) where mix is the standard SplitMix64
# finalizer.  Words are turned into uniforms u = (word >> 11) * 2^-53 and
# normals come from the Box-Muller transform applied to word pairs
# (2j, 2j+1).  Everything is exact 64-bit integer and IEEE double
# arithmetic, so any language reproduces identical latents bit for bit.
# ---------------------------------------------------------------------------

_SM64_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM64_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM64_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(seed: int, count: int) -> np.ndarray:
    idx = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _SM64_GAMMA
        z ^= z >> np.uint64(30)
        z *= _SM64_M1
        z ^= z >> np.uint64(27)
        z *= _SM64_M2
        z ^= z >> np.uint64(31)
    return z


def sample_latents(seed: int, n: int, latent_dim: int) -> np.ndarray:
    """Deterministic standard-normal latents, shape (n, latent_dim) float32.

    Uses the SplitMix64 counter PRNG with Box-Muller (see module comment);
    the stream depends only on (seed, n * latent_dim).
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    count = n * latent_dim
    if count == 0:
        return np.zeros((n, latent_dim), dtype=np.float32)
    pairs = (count + 1) // 2
    words = _splitmix64(seed, 2 * pairs)
    # u1 in (0, 1] so log is finite; u2 in [0, 1).
    u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count].astype(np.float32).reshape(n, latent_dim)


# ---------------------------------------------------------------------------
# GTF v1 container: JSON header + "\n\0" + little-endian float32 blob.
# ---------------------------------------------------------------------------


def gtf_bytes(tensors: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    """Serialize named float32 tensors plus JSON metadata as GTF v1 bytes.

    The header is canonical JSON (sorted keys, no whitespace) and tensors
    are laid out in name order, so identical content always produces
    identical bytes.
    """
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float32))
        data = arr.astype("<f4", copy=False).tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32le", "offset": offset}
        )
        blobs.append(data)
        offset += len(data)
    header = {
        "magic": GTF_MAGIC,
        "metadata": metadata or {},
        "tensors": manifest,
        "blob_bytes": offset,
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([payload, _GTF_SEPARATOR, *blobs])


def write_gtf(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(gtf_bytes(tensors, metadata))


def read_gtf(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a GTF v1 container; returns (tensors, metadata)."""
    with open(path, "rb") as f:
        raw = f.read()
    sep = raw.find(_GTF_SEPARATOR)
    if sep < 0:
        raise FixtureError(f"{path}: missing header separator")
    try:
        header = json.loads(raw[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FixtureError(f"{path}: malformed JSON header: {e}") from e
    magic = header.get("magic")
    if magic != GTF_MAGIC:
        raise FixtureError(f"{path}: bad magic {magic!r}, expected {GTF_MAGIC!r}")
    blob = raw[sep + len(_GTF_SEPARATOR):]
    declared = header.get("blob_bytes")
    if declared != len(blob):
        raise FixtureError(
            f"{path}: blob is {len(blob)} bytes but header declares {declared}"
        )
    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * n
        if end > len(blob):
            raise FixtureError(f"{path}: tensor {entry['name']!r} extends past blob end")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32, copy=True)
    return tensors, header.get("metadata", {})


def fixture_bytes(gen: Generator, extra_tensors=None, metadata=None) -> bytes:
    """GTF v1 serialization of a generator (plus optional extra tensors)."""
    tensors = {}
    for i, layer in enumerate(gen.layers, start=1):
        tensors[f"layer{i}/weights"] = layer.weights
        tensors[f"layer{i}/bias"] = layer.bias
    if extra_tensors:
        overlap = set(tensors) & set(extra_tensors)
        if overlap:
            raise ValueError(f"extra tensor names clash with layer tensors: {overlap}")
        tensors.update(extra_tensors)
    meta = dict(metadata or {})
    meta["architecture"] = {
        "latent_dim": gen.latent_dim,
        "base_size": gen.base_size,
        "output_channels": gen.output_channels,
        "layers": [
            {
                "out_channels": l.out_channels,
                "in_channels": l.in_channels,
                "kernel": list(l.kernel),
                "nonlinearity": l.nonlinearity,
                "upsample": l.upsample,
            }
            for l in gen.layers
        ],
    }
    return gtf_bytes(tensors, meta)


def save_fixture(gen: Generator, path, extra_tensors=None, metadata=None) -> None:
    """Persist a generator (and optional extra tensors) as a GTF v1 file."""
    with open(path, "wb") as f:
        f.write(fixture_bytes(gen, extra_tensors, metadata))


def generator_hash(gen: Generator) -> str:
    """Content hash of a generator: sha256 of its canonical GTF bytes."""
    import hashlib

    return hashlib.sha256(fixture_bytes(gen)).hexdigest()


def load_fixture(path) -> Generator:
    gen, _, _ = load_fixture_full(path)
    return gen


def load_fixture_full(path) -> tuple[Generator, dict[str, np.ndarray], dict]:
    """Load a generator fixture; returns (generator, all tensors, metadata)."""
    tensors, meta = read_gtf(path)
    arch = meta.get("architecture")
    if not arch:
        raise FixtureError(f"{path}: no architecture metadata; not a generator fixture")
    layers = []
    for i, spec in enumerate(arch["layers"], start=1):
        try:
            w = tensors[f"layer{i}/weights"]
            b = tensors[f"layer{i}/bias"]
        except KeyError as e:
            raise FixtureError(f"{path}: missing tensor for layer {i}") from e
        layers.append(
            LayerSpec(w, b, nonlinearity=spec["nonlinearity"], upsample=spec["upsample"])
        )
    gen = Generator(
        latent_dim=arch["latent_dim"],
        layers=tuple(layers),
        base_size=arch["base_size"],
        output_channels=arch["output_channels"],
    )
    return gen, tensors, meta


def image_to_png_bytes(image: np.ndarray) -> bytes:
    """Encode a (3, H, W) image in [-1, 1] as 8-bit RGB PNG bytes."""
    from io import BytesIO

    from PIL import Image

    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {arr.shape}")
    scaled = np.rint((arr + 1.0) * 127.5)  # round-half-even
    u8 = np.clip(scaled, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    buf = BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_png(image: np.ndarray, path) -> None:
    with open(path, "wb") as f:
        f.write(image_to_png_bytes(image))


# ---------------------------------------------------------------------------
# Planted-rule fixture construction.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlantedRule:
    """One known key->value association stored in the memory layer."""

    index: int
    latent_seed: int
    z: np.ndarray  # (latent_dim,) float32
    location: tuple[int, int]  # cell on the memory layer's value grid
    key: np.ndarray  # (N,) float32, the conv-input column at `location`
    value: np.ndarray  # (M,) float32, flattened out_ch x kh x kw patch
    motif: np.ndarray  # (3, ch, cw) float32 isolated-render image crop
    image_box: tuple[int, int, int, int]  # y0, y1, x0, x1 pixel crop


@dataclass(frozen=True)
class PlantedManifest:
    layer: int
    rules: tuple[PlantedRule, ...] = field(default_factory=tuple)


# Plant sites on the memory layer's pre-upsample grid, chosen where the
# border zero-padding makes the key pattern unique to that cell: the four
# corners first, then cells one step inside them.
_PLANT_SITES = [
    (0, 0), (0, -1), (-1, 0), (-1, -1),
    (1, 1), (1, -2), (-2, 1), (-2, -2),
]

_DESK_CHANNELS = (32, 32, 16)
_DESK_LATENT = 32
_DESK_BASE = 4
_N_MARKERS = 4  # corner-detector channels in the layer feeding the memory


def _corner_marker_kernel(corner: int, P: float, Q: float) -> np.ndarray:
    """3x3 spatial profile firing only at one zero-padded grid corner.

    Positive taps sit on the quadrant that survives the border clipping at
    that corner; the remaining taps are negative so edge and interior cells
    stay below zero.  corner: 0=TL, 1=TR, 2=BL, 3=BR.
    """
    s = np.full((3, 3), -Q)
    rows = slice(1, 3) if corner in (0, 1) else slice(0, 2)
    cols = slice(1, 3) if corner in (0, 2) else slice(0, 2)
    s[rows, cols] = P
    return s


def _dedup_marker_kernel(corner: int) -> np.ndarray:
    """3x3 profile keeping only the outermost cell of an upsampled marker's
    2x2 duplicate block.

    Reading a channel that is positive on a corner-adjacent 2x2 block, the
    +1 tap sees the block only from the true corner cell, and the -1/2
    taps veto the other three duplicates.
    """
    s = np.zeros((3, 3))
    s[2, 2] = 1.0
    s[0, 1] = s[0, 2] = s[1, 0] = s[2, 0] = -0.5
    if corner in (2, 3):
        s = s[::-1, :]
    if corner in (1, 3):
        s = s[:, ::-1]
    return s


def desk_architecture(seed: int, latent_scale: float = 0.25) -> Generator:
    """Random desk-scale generator: latent 32, grids 4->8->16->32->32.

    `latent_scale` sets the strength of the latent-dependent path relative
    to the bias-driven constant structure (small values keep keys at a
    fixed location nearly constant across latents).  Four channels of the
    middle layers act as corner detectors: rare, low-variance key
    components that make exactly one grid cell statistically distinctive,
    standing in for the way an object-specific feature is rare in a
    trained generator.  relu on those layers keeps the markers exactly
    zero away from their corner.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    chans = [_DESK_LATENT, *_DESK_CHANNELS, 3]
    ups = [2, 2, 2, 1]
    nonlins = ["leaky_relu", "relu", "relu", "tanh"]
    layers = []
    for i in range(4):
        cin, cout = chans[i], chans[i + 1]
        fan = cin * 9
        scale = latent_scale if i == 0 else 1.0
        w = rng.normal(0.0, scale / np.sqrt(fan), size=(cout, cin, 3, 3))
        b = rng.normal(0.0, 0.8, size=cout) if i < 3 else np.zeros(cout)
        if i == 1:
            # Corner markers on the 16x16 grid, driven by the constant
            # (bias-borne) structure of the incoming features.
            bias1 = layers[0].bias.astype(np.float64)
            const_in = apply_nonlinearity(bias1, layers[0].nonlinearity)
            gamma = float(np.linalg.norm(const_in))
            e = const_in / gamma
            P = 3.0 / gamma
            Q = 2.0 * P
            for m in range(_N_MARKERS):
                ch = cout - _N_MARKERS + m
                profile = _corner_marker_kernel(m, P, Q)
                w[ch] = e[:, None, None] * profile[None, :, :]
                b[ch] = -6.0
        if i == 2:
            # Pass the markers up to the 32x32 grid, collapsing each
            # upsampled 2x2 duplicate block to its single true corner cell.
            for m in range(_N_MARKERS):
                ch = cout - _N_MARKERS + m
                src = cin - _N_MARKERS + m
                w[ch] = 0.0
                w[ch, src] = _dedup_marker_kernel(m)
                b[ch] = -3.0
        layers.append(LayerSpec(w, b, nonlinearity=nonlins[i], upsample=ups[i]))
    return Generator(_DESK_LATENT, tuple(layers), base_size=_DESK_BASE)


def _motif_value(rng: np.random.Generator, out_ch: int, kh: int, kw: int, amp: float) -> np.ndarray:
    """A strong, structured value patch: a few active channels, signed blob."""
    v = np.zeros((out_ch, kh, kw))
    active = rng.choice(out_ch, size=3, replace=False)
    for c in active:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        v[c] = sign * amp * (0.5 + rng.random((kh, kw)))
    return v.ravel()


def build_planted_generator(
    seed: int,
    n_rules: int,
    memory_layer: int = 4,
    latent_scale: float = 0.25,
    value_amp: float = 2.0,
):
    """Generator whose memory layer stores `n_rules` known associations.

    The upstream layers are random but bias-dominated, so the key at each
    plant site is nearly latent-independent; the memory layer's weights are
    the least-squares memory over the measured (key, value) pairs plus one
    background pair, making every stored recall exact.  Returns
    (generator, manifest).
    """
    from . import assocmem  # deferred: assocmem imports this module

    base = desk_architecture(seed, latent_scale=latent_scale)
    L = memory_layer
    _check_layer_index(base, L)
    mem = base.layers[L - 1]
    n_in = mem.in_channels
    if not 1 <= n_rules <= n_in:
        raise ValueError(f"n_rules must be in 1..{n_in}, got {n_rules}")
    kh, kw = mem.kernel
    out_ch = mem.out_channels

    # One addressable latent seed per rule so sessions can reference the
    # rule's own sample.
    rule_seeds = [seed + 7919 + i for i in range(n_rules)]
    rule_latents = np.stack(
        [sample_latents(s, 1, base.latent_dim)[0] for s in rule_seeds]
    ) if n_rules else np.zeros((0, base.latent_dim), dtype=np.float32)
    rng = np.random.Generator(np.random.Philox(key=seed ^ 0x9D2C5680))

    # Measure keys at the plant sites; grid coordinates are on the conv
    # input of the memory layer (after its upsample).
    k_probe, _ = features(base, rule_latents[0] if n_rules else np.zeros(base.latent_dim), L)
    gh, gw = k_probe.height, k_probe.width
    up = base.layers[L - 1].upsample
    pre_h, pre_w = gh // up, gw // up

    keys, values, locations = [], [], []
    for i in range(n_rules):
        sy, sx = _PLANT_SITES[i % len(_PLANT_SITES)]
        cell = (sy % pre_h, sx % pre_w)
        loc = (cell[0] * up, cell[1] * up)
        k_map, _ = features(base, rule_latents[i], L)
        keys.append(k_map.data[:, loc[0], loc[1]].astype(np.float64))
        values.append(_motif_value(rng, out_ch, kh, kw, value_amp))
        locations.append(loc)

    # Background pair: the typical interior key maps to a gentle patch, so
    # unrelated locations render something stable.
    bg_lat = sample_latents(seed + 104729, 16, base.latent_dim)
    bg_keys = []
    for z in bg_lat:
        k_map, _ = features(base, z, L)
        bg_keys.append(k_map.data[:, gh // 2, gw // 2].astype(np.float64))
    k_bg = np.mean(bg_keys, axis=0)
    v_bg = 0.2 * rng.standard_normal(out_ch * kh * kw)

    K = np.stack(keys + [k_bg], axis=1)
    V = np.stack(values + [v_bg], axis=1)
    rank = np.linalg.matrix_rank(K)
    if rank < K.shape[1]:
        raise ValueError(
            f"planted keys are linearly dependent (rank {rank} < {K.shape[1]}); "
            "use fewer rules or a different seed"
        )
    W = linalg.solve_least_squares(K, V)
    new_weights = assocmem.matrix_to_weights(W, out_ch, n_in, kh, kw)
    planted_layer = LayerSpec(
        new_weights,
        np.zeros(out_ch, dtype=np.float32),
        nonlinearity=mem.nonlinearity,
        upsample=mem.upsample,
    )
    gen = base.replace_layer(L, planted_layer)

    scale = image_scale_after(gen, L)
    grow = receptive_growth_after(gen, L)
    rules = []
    for i in range(n_rules):
        loc = locations[i]
        k_map, v_map = features(gen, rule_latents[i], L)
        iso = render_isolated_patch(gen, v_map, loc, L)
        ry, rx = (kh - 1) // 2, (kw - 1) // 2
        img_h = v_map.height * scale
        img_w = v_map.width * scale
        # The rule's duplicated cell block writes kernel patches, and later
        # layers spread those pixels further; the box covers all of it.
        y0 = max(0, (loc[0] - ry) * scale - grow)
        y1 = min(img_h, (loc[0] + ry + up) * scale + grow)
        x0 = max(0, (loc[1] - rx) * scale - grow)
        x1 = min(img_w, (loc[1] + rx + up) * scale + grow)
        box = (y0, y1, x0, x1)
        rules.append(
            PlantedRule(
                index=i,
                latent_seed=rule_seeds[i],
                z=rule_latents[i],
                location=loc,
                key=keys[i].astype(np.float32),
                value=values[i].astype(np.float32),
                motif=iso[:, y0:y1, x0:x1].astype(np.float32),
                image_box=box,
            )
        )
    return gen, PlantedManifest(layer=L, rules=tuple(rules))


def save_planted(gen: Generator, manifest: PlantedManifest, path) -> None:
    """Persist a planted fixture (generator + manifest) as one GTF file."""
    extra = {}
    meta_rules = []
    for r in manifest.rules:
        prefix = f"rule{r.index}"
        extra[f"{prefix}/z"] = r.z
        extra[f"{prefix}/key"] = r.key
        extra[f"{prefix}/value"] = r.value
        extra[f"{prefix}/motif"] = r.motif
        meta_rules.append(
            {
                "index": r.index,
                "latent_seed": r.latent_seed,
                "location": list(r.location),
                "image_box": list(r.image_box),
            }
        )
    meta = {"planted": {"layer": manifest.layer, "rules": meta_rules}}
    save_fixture(gen, path, extra_tensors=extra, metadata=meta)


def load_planted(path) -> tuple[Generator, PlantedManifest]:
    gen, tensors, meta = load_fixture_full(path)
    planted = meta.get("planted")
    if not planted:
        raise FixtureError(f"{path}: no planted-rule manifest")
    rules = []
    for entry in planted["rules"]:
        i = entry["index"]
        rules.append(
            PlantedRule(
                index=i,
                latent_seed=entry["latent_seed"],
                z=tensors[f"rule{i}/z"],
                location=tuple(entry["location"]),
                key=tensors[f"rule{i}/key"],
                value=tensors[f"rule{i}/value"],
                motif=tensors[f"rule{i}/motif"],
                image_box=tuple(entry["image_box"]),
            )
        )
    return gen, PlantedManifest(layer=planted["layer"], rules=tuple(rules))
