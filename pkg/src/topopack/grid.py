"""Patch-feature grids, the pack layout of the hierarchical token sequence, and
the FGRID binary file format.

Token order is ``[global, pack_0 patches..., summary_0, pack_1 ..., summary_{M-1}]``
with packs enumerated row-major over the pack grid and patches row-major
inside each k x k window. All indices are 0-based.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Role",
    "FeatureGrid",
    "PackLayout",
    "TokenSequence",
    "pad_grid",
    "build_layout",
    "coord_to_token",
    "token_to_coord",
    "summary_token_index",
    "global_token_index",
    "assemble_sequence",
    "write_fgrid",
    "read_fgrid",
    "FGRID_MAGIC",
]

FGRID_MAGIC = b"FGRD"
FGRID_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class Role(enum.IntEnum):
    GLOBAL = 0
    PATCH = 1
    SUMMARY = 2
    PADDED_PATCH = 3


@dataclass(frozen=True)
class FeatureGrid:
    """H x W grid of D-dim patch features plus a validity bitmap.

    ``raw_shape`` records the (H, W) before padding.
    """

    features: np.ndarray
    valid: np.ndarray = None
    raw_shape: tuple = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 3:
            raise ValueError(f"features must be H x W x D, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        valid = (np.ones(feats.shape[:2], dtype=bool) if self.valid is None
                 else np.asarray(self.valid, dtype=bool))
        if valid.shape != feats.shape[:2]:
            raise ValueError("valid bitmap shape does not match grid")
        feats = np.where(valid[..., None], feats, 0.0)
        feats.flags.writeable = False
        valid = valid.copy()
        valid.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "valid", valid)
        if self.raw_shape is None:
            object.__setattr__(self, "raw_shape", feats.shape[:2])

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]


@dataclass(frozen=True)
class PackLayout:
    height: int
    width: int
    k: int

    @property
    def pack_rows(self) -> int:
        return self.height // self.k

    @property
    def pack_cols(self) -> int:
        return self.width // self.k

    @property
    def num_packs(self) -> int:
        return self.pack_rows * self.pack_cols

    @property
    def tokens_per_pack(self) -> int:
        return self.k * self.k + 1

    @property
    def length(self) -> int:
        return 1 + self.num_packs * self.tokens_per_pack

    def pack_range(self, m: int) -> range:
        """Token indices of pack ``m`` (patches then summary)."""
        start = 1 + m * self.tokens_per_pack
        return range(start, start + self.tokens_per_pack)

    def roles(self, valid=None) -> np.ndarray:
        roles = np.full(self.length, Role.PATCH, dtype=np.int8)
        roles[0] = Role.GLOBAL
        roles[self.summary_indices()] = Role.SUMMARY
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            rows, cols = np.nonzero(~valid)
            roles[self.cell_tokens()[rows, cols]] = Role.PADDED_PATCH
        return roles

    def summary_indices(self) -> np.ndarray:
        return (np.arange(self.num_packs) + 1) * self.tokens_per_pack

    def patch_indices(self) -> np.ndarray:
        """(M, k*k) token indices of each pack's patches."""
        base = 1 + np.arange(self.num_packs)[:, None] * self.tokens_per_pack
        return base + np.arange(self.k * self.k)[None, :]

    def cell_tokens(self) -> np.ndarray:
        """(H, W) array mapping each grid cell to its token index."""
        i, j = np.indices((self.height, self.width))
        return _coord_to_token(self, i, j)

    def pack_of_token(self) -> np.ndarray:
        """Pack index per token; -1 for the global token."""
        idx = np.arange(self.length)
        return np.where(idx == 0, -1, (idx - 1) // self.tokens_per_pack)


@dataclass(frozen=True)
class TokenSequence:
    layout: PackLayout
    embeddings: np.ndarray
    roles: np.ndarray
    valid: np.ndarray = field(default=None)

    @property
    def token_valid(self) -> np.ndarray:
        return self.roles != Role.PADDED_PATCH


def pad_grid(grid: FeatureGrid, k: int) -> FeatureGrid:
    if k < 1:
        raise ValueError("k must be >= 1")
    h, w, d = grid.features.shape
    ph, pw = -(-h // k) * k, -(-w // k) * k
    if (ph, pw) == (h, w):
        return grid
    feats = np.zeros((ph, pw, d))
    feats[:h, :w] = grid.features
    valid = np.zeros((ph, pw), dtype=bool)
    valid[:h, :w] = grid.valid
    return FeatureGrid(feats, valid, raw_shape=grid.raw_shape)


def build_layout(height: int, width: int, k: int) -> PackLayout:
    if k < 1 or height < 1 or width < 1:
        raise ValueError("dimensions and k must be >= 1")
    if height % k or width % k:
        raise ValueError(f"grid {height}x{width} not divisible by k={k}; pad first")
    return PackLayout(height, width, k)


def _coord_to_token(layout: PackLayout, i, j):
    k = layout.k
    m = (i // k) * layout.pack_cols + (j // k)
    return 1 + m * layout.tokens_per_pack + (i % k) * k + (j % k)


def coord_to_token(layout: PackLayout, i: int, j: int) -> int:
    if not (0 <= i < layout.height and 0 <= j < layout.width):
        raise IndexError(f"cell ({i}, {j}) outside {layout.height}x{layout.width} grid")
    return int(_coord_to_token(layout, i, j))


def token_to_coord(layout: PackLayout, t: int) -> tuple[int, int]:
    if not 0 < t < layout.length:
        raise IndexError(f"token {t} is not a patch token")
    m, off = divmod(t - 1, layout.tokens_per_pack)
    if off == layout.k * layout.k:
        raise IndexError(f"token {t} is a summary token")
    pr, pc = divmod(m, layout.pack_cols)
    r, c = divmod(off, layout.k)
    return pr * layout.k + r, pc * layout.k + c


def summary_token_index(layout: PackLayout, m: int) -> int:
    if not 0 <= m < layout.num_packs:
        raise IndexError(f"pack {m} out of range [0, {layout.num_packs})")
    return (m + 1) * layout.tokens_per_pack


def global_token_index(layout: PackLayout) -> int:
    return 0


def assemble_sequence(grid: FeatureGrid, layout: PackLayout, summaries, global_token) -> TokenSequence:
    summaries = np.asarray(summaries, dtype=np.float64)
    global_token = np.asarray(global_token, dtype=np.float64)
    d = grid.dim
    if (grid.height, grid.width) != (layout.height, layout.width):
        raise ValueError("grid and layout dimensions differ")
    if summaries.shape != (layout.num_packs, d):
        raise ValueError(f"summaries must be {(layout.num_packs, d)}, got {summaries.shape}")
    if global_token.shape != (d,):
        raise ValueError(f"global token must have shape {(d,)}, got {global_token.shape}")
    emb = np.zeros((layout.length, d))
    emb[0] = global_token
    emb[layout.cell_tokens()] = grid.features
    emb[layout.summary_indices()] = summaries
    return TokenSequence(layout, emb, layout.roles(grid.valid), grid.valid)


# -- FGRID -------------------------------------------------------------------

def encode_fgrid(grid: FeatureGrid) -> bytes:
    h, w, d = grid.features.shape
    head = _HEADER.pack(FGRID_MAGIC, FGRID_VERSION, h, w, d)
    body = grid.features.astype("<f4").tobytes(order="C")
    bits = np.packbits(grid.valid.ravel(), bitorder="little").tobytes()
    return head + body + bits


def decode_fgrid(buf: bytes) -> FeatureGrid:
    if len(buf) < _HEADER.size:
        raise ValueError("truncated FGRID header")
    magic, version, h, w, d = _HEADER.unpack_from(buf)
    if magic != FGRID_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FGRID_VERSION:
        raise ValueError(f"unsupported FGRID version {version}")
    n_feat = h * w * d
    n_bits = -(-h * w // 8)
    expected = _HEADER.size + 4 * n_feat + n_bits
    if len(buf) != expected:
        raise ValueError(f"FGRID size {len(buf)} != expected {expected}")
    feats = np.frombuffer(buf, dtype="<f4", count=n_feat, offset=_HEADER.size)
    bits = np.frombuffer(buf, dtype=np.uint8, count=n_bits, offset=_HEADER.size + 4 * n_feat)
    valid = np.unpackbits(bits, bitorder="little")[: h * w].astype(bool)
    return FeatureGrid(feats.astype(np.float64).reshape(h, w, d), valid.reshape(h, w))


def write_fgrid(path, grid: FeatureGrid) -> None:
    Path(path).write_bytes(encode_fgrid(grid))


def read_fgrid(path) -> FeatureGrid:
    return decode_fgrid(Path(path).read_bytes())
