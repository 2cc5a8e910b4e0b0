"""Pre-norm Transformer encoder with the topo-pack mask in every layer, plus a
toy frozen patch encoder used to build patch, summary and global tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import topo_attention
from .grid import FeatureGrid, PackLayout, Role, TokenSequence, assemble_sequence, build_layout, pad_grid
from .numerics import Tape, Var
from .topomask import TopoMaskDescriptor, build_descriptor

__all__ = [
    "EncoderConfig",
    "EncoderOutput",
    "init_encoder_params",
    "encoder_graph",
    "encoder_forward",
    "positional_table",
    "toy_encode_region",
    "feature_summaries",
    "encode_image",
    "sequence_from_grid",
    "as_vars",
]

_LAYER_KEYS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int
    layers: int = 2
    heads: int = 2
    ff_dim: int = None
    k: int = 3
    seed: int = 0
    positional: bool = True

    def __post_init__(self):
        if self.ff_dim is None:
            object.__setattr__(self, "ff_dim", 2 * self.dim)
        if min(self.dim, self.layers, self.heads, self.ff_dim, self.k) < 1:
            raise ValueError("all encoder dimensions must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass(frozen=True)
class EncoderOutput:
    tokens: np.ndarray
    layout: PackLayout

    @property
    def summaries(self) -> np.ndarray:
        return self.tokens[self.layout.summary_indices()]

    @property
    def global_token(self) -> np.ndarray:
        return self.tokens[0]


def init_encoder_params(config: EncoderConfig, seed: int | None = None,
                        zero_branches: bool = False, prefix: str = "") -> dict:
    """Seeded parameter dict. ``zero_branches`` zeroes the residual output
    projections so every block starts as the identity."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    D, F = config.dim, config.ff_dim
    p = {}
    if config.positional:
        p[prefix + "role_emb"] = 0.02 * rng.standard_normal((len(Role), D))
    for layer in range(config.layers):
        name = f"{prefix}l{layer}."
        p[name + "ln1_g"] = np.ones(D)
        p[name + "ln1_b"] = np.zeros(D)
        for w in ("wq", "wk", "wv"):
            p[name + w] = rng.standard_normal((D, D)) / np.sqrt(D)
        p[name + "wo"] = np.zeros((D, D)) if zero_branches else rng.standard_normal((D, D)) / np.sqrt(D)
        p[name + "ln2_g"] = np.ones(D)
        p[name + "ln2_b"] = np.zeros(D)
        p[name + "w1"] = rng.standard_normal((D, F)) / np.sqrt(D)
        p[name + "b1"] = np.zeros(F)
        p[name + "w2"] = np.zeros((F, D)) if zero_branches else rng.standard_normal((F, D)) / np.sqrt(F)
        p[name + "b2"] = np.zeros(D)
    return p


def as_vars(tape: Tape, params: dict) -> dict:
    return {name: tape.param(value) for name, value in params.items()}


def _sinusoid(coord: np.ndarray, width: int) -> np.ndarray:
    freqs = 1.0 / (100.0 ** (np.arange(width // 2) * 2.0 / max(width, 2)))
    ang = coord[:, None] * freqs[None]
    out = np.zeros((len(coord), width))
    out[:, 0:2 * len(freqs):2] = np.sin(ang)
    out[:, 1:2 * len(freqs):2] = np.cos(ang)
    return out


def positional_table(layout: PackLayout, dim: int) -> np.ndarray:
    """2D sinusoidal encoding of cell coordinates (patches) and pack centres
    (summaries); the global token gets zeros."""
    n, k = layout.length, layout.k
    rows, cols = np.zeros(n), np.zeros(n)
    i, j = np.indices((layout.height, layout.width))
    cells = layout.cell_tokens()
    rows[cells], cols[cells] = i, j
    m = np.arange(layout.num_packs)
    centre = (k - 1) / 2.0
    rows[layout.summary_indices()] = (m // layout.pack_cols) * k + centre
    cols[layout.summary_indices()] = (m % layout.pack_cols) * k + centre
    half = dim // 2
    table = np.zeros((n, dim))
    table[:, :half] = _sinusoid(rows, half)
    table[:, half:2 * half] = _sinusoid(cols, half)
    table[0] = 0.0
    return table


def encoder_graph(tape: Tape, x: Var, params: dict, config: EncoderConfig,
                  desc: TopoMaskDescriptor, roles=None, prefix: str = "") -> Var:
    """Record the encoder on ``tape``. ``params`` maps names to Vars."""
    n = desc.length
    if x.shape != (n, config.dim):
        raise ValueError(f"input shape {x.shape} does not match ({n}, {config.dim})")
    h, hd = config.heads, config.head_dim
    if config.positional:
        roles = desc.layout.roles(desc.valid) if roles is None else roles
        x = tape.add(x, tape.gather(params[prefix + "role_emb"], roles.astype(np.intp)))
        x = tape.add(x, positional_table(desc.layout, config.dim))
    for layer in range(config.layers):
        p = {key: params[f"{prefix}l{layer}.{key}"] for key in _LAYER_KEYS}
        xn = tape.layer_norm(x, p["ln1_g"], p["ln1_b"])
        heads = []
        for w in ("wq", "wk", "wv"):
            proj = tape.reshape(tape.matmul(xn, p[w]), (n, h, hd))
            heads.append(tape.transpose(proj, (1, 0, 2)))
        att = topo_attention(tape, *heads, desc)
        att = tape.reshape(tape.transpose(att, (1, 0, 2)), (n, config.dim))
        x = tape.add(x, tape.matmul(att, p["wo"]))
        xn = tape.layer_norm(x, p["ln2_g"], p["ln2_b"])
        ff = tape.gelu(tape.add(tape.matmul(xn, p["w1"]), p["b1"]))
        x = tape.add(x, tape.add(tape.matmul(ff, p["w2"]), p["b2"]))
        if not np.all(np.isfinite(x.value)):
            raise FloatingPointError(f"non-finite activation in encoder layer {layer}")
    return x


def encoder_forward(seq: TokenSequence, config: EncoderConfig, params: dict,
                    desc: TopoMaskDescriptor | None = None) -> EncoderOutput:
    if desc is None:
        desc = build_descriptor(seq.layout, seq.valid)
    if desc.length != len(seq.embeddings):
        raise ValueError("sequence length does not match descriptor")
    tape = Tape()
    out = encoder_graph(tape, tape.const(seq.embeddings), as_vars(tape, params), config, desc, seq.roles)
    return EncoderOutput(out.value, seq.layout)


# -- toy patch encoder -------------------------------------------------------

_RASTER = 8


def _pool_to_raster(region: np.ndarray) -> np.ndarray:
    """Area mean-pool an (h, w, c) region to 8 x 8 x c; bins of small inputs
    overlap so any h, w >= 1 works."""
    h, w = region.shape[:2]
    out = np.empty((_RASTER, _RASTER, region.shape[2]))
    rb = [(r * h // _RASTER, max(r * h // _RASTER + 1, -(-(r + 1) * h // _RASTER))) for r in range(_RASTER)]
    cb = [(c * w // _RASTER, max(c * w // _RASTER + 1, -(-(c + 1) * w // _RASTER))) for c in range(_RASTER)]
    for r, (r0, r1) in enumerate(rb):
        for c, (c0, c1) in enumerate(cb):
            out[r, c] = region[r0:r1, c0:c1].mean(axis=(0, 1))
    return out


def _toy_map(dim: int, channels: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, dim, channels])
    fan_in = _RASTER * _RASTER * channels
    return rng.standard_normal((dim, fan_in)) / np.sqrt(fan_in)


def toy_encode_region(region, dim: int, seed: int = 0) -> np.ndarray:
    """Frozen toy encoder: mean-pool to an 8 x 8 raster per channel, then a
    seeded linear map to ``dim`` features."""
    region = np.asarray(region, dtype=np.float64)
    if region.ndim == 2:
        region = region[..., None]
    if region.ndim != 3 or region.size == 0:
        raise ValueError("region must be a nonempty (h, w) or (h, w, c) array")
    pooled = _pool_to_raster(region)
    return _toy_map(dim, region.shape[2], seed) @ pooled.ravel()


def feature_summaries(grid: FeatureGrid, layout: PackLayout) -> tuple[np.ndarray, np.ndarray]:
    """Fallback summaries: mean of each pack's valid patch features, and the
    mean of all valid features as the global token (zeros when empty)."""
    k, d = layout.k, grid.dim
    feats = grid.features.reshape(layout.pack_rows, k, layout.pack_cols, k, d)
    feats = feats.transpose(0, 2, 1, 3, 4).reshape(layout.num_packs, k * k, d)
    valid = grid.valid.reshape(layout.pack_rows, k, layout.pack_cols, k)
    valid = valid.transpose(0, 2, 1, 3).reshape(layout.num_packs, k * k)
    counts = valid.sum(axis=1, keepdims=True)
    summaries = feats.sum(axis=1) / np.maximum(counts, 1)
    total = grid.valid.sum()
    global_token = grid.features.sum(axis=(0, 1)) / max(total, 1)
    return summaries, global_token


def sequence_from_grid(grid: FeatureGrid, k: int) -> TokenSequence:
    """Pad, lay out and assemble a sequence with fallback summary/global tokens."""
    grid = pad_grid(grid, k)
    layout = build_layout(grid.height, grid.width, k)
    summaries, global_token = feature_summaries(grid, layout)
    return assemble_sequence(grid, layout, summaries, global_token)


def encode_image(image, patch: int, k: int, dim: int, seed: int = 0) -> TokenSequence:
    """Tessellate an image into ``patch`` x ``patch`` tiles and encode tiles,
    pack regions and the whole image with the same toy encoder."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    hg, wg = image.shape[0] // patch, image.shape[1] // patch
    if hg < 1 or wg < 1:
        raise ValueError("image smaller than one patch")
    feats = np.empty((hg, wg, dim))
    for i in range(hg):
        for j in range(wg):
            feats[i, j] = toy_encode_region(image[i * patch:(i + 1) * patch, j * patch:(j + 1) * patch], dim, seed)
    grid = pad_grid(FeatureGrid(feats), k)
    layout = build_layout(grid.height, grid.width, k)
    span = k * patch
    summaries = np.empty((layout.num_packs, dim))
    for m in range(layout.num_packs):
        pr, pc = divmod(m, layout.pack_cols)
        window = image[pr * span:min((pr + 1) * span, hg * patch), pc * span:min((pc + 1) * span, wg * patch)]
        summaries[m] = toy_encode_region(window, dim, seed)
    global_token = toy_encode_region(image[:hg * patch, :wg * patch], dim, seed)
    return assemble_sequence(grid, layout, summaries, global_token)
