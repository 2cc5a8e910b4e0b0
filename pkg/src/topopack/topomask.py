"""The hierarchical topo-pack attention mask.

Four rules admit a (query, key) pair; everything else is blocked:

* global sink     - every query may attend to the global token (key 0)
* intra-pack      - patch -> patch inside the same pack
* aggregation     - summary -> patch of its own pack
* summary level   - summary -> any summary

Padded patches never act as keys, and as queries they only see the global
token.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .grid import PackLayout, Role, token_to_coord

__all__ = [
    "Rule",
    "Block",
    "TopoMaskDescriptor",
    "mask_entry",
    "match_rule",
    "dense_mask",
    "build_descriptor",
    "allowed_count",
    "sparsity_ratio",
    "flop_estimate",
    "mask_stats",
]


class Rule(enum.IntEnum):
    GLOBAL_SINK = 0
    INTRA_PACK = 1
    AGGREGATION = 2
    SUMMARY_LEVEL = 3


def _role_of(layout: PackLayout, t: int) -> tuple[Role, int]:
    if t == 0:
        return Role.GLOBAL, -1
    m, off = divmod(t - 1, layout.tokens_per_pack)
    return (Role.SUMMARY if off == layout.k * layout.k else Role.PATCH), m


def _is_padded(layout: PackLayout, t: int, valid) -> bool:
    if valid is None:
        return False
    role, m = _role_of(layout, t)
    if role is not Role.PATCH:
        return False
    return not bool(np.asarray(valid)[token_to_coord(layout, t)])


def match_rule(layout: PackLayout, i: int, j: int, valid=None):
    """First rule admitting query ``i`` -> key ``j``, or ``None`` if blocked."""
    n = layout.length
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"token pair ({i}, {j}) outside sequence of length {n}")
    if j == 0:
        return Rule.GLOBAL_SINK
    if _is_padded(layout, i, valid) or _is_padded(layout, j, valid):
        return None
    ri, mi = _role_of(layout, i)
    rj, mj = _role_of(layout, j)
    if ri is Role.PATCH and rj is Role.PATCH and mi == mj:
        return Rule.INTRA_PACK
    if ri is Role.SUMMARY and rj is Role.PATCH and mi == mj:
        return Rule.AGGREGATION
    if ri is Role.SUMMARY and rj is Role.SUMMARY:
        return Rule.SUMMARY_LEVEL
    return None


def mask_entry(layout: PackLayout, i: int, j: int, valid=None) -> bool:
    """True when query ``i`` may attend to key ``j``."""
    return match_rule(layout, i, j, valid) is not None


def dense_mask(layout: PackLayout, valid=None, rows=None) -> np.ndarray:
    """Boolean mask rows (all N rows by default), vectorised over roles and packs."""
    roles = layout.roles(valid)
    pack = layout.pack_of_token()
    rows = np.arange(layout.length) if rows is None else np.asarray(rows)
    patch = roles == Role.PATCH
    summ = roles == Role.SUMMARY
    same = pack[rows, None] == pack[None, :]
    allowed = (patch[rows, None] & patch[None, :] & same) \
        | (summ[rows, None] & patch[None, :] & same) \
        | (summ[rows, None] & summ[None, :])
    allowed[:, 0] = True
    return allowed


@dataclass(frozen=True)
class Block:
    """Dense block of allowed entries: every query in ``queries`` x every key in ``keys``."""

    rule: Rule
    queries: np.ndarray
    keys: np.ndarray

    @property
    def size(self) -> int:
        return len(self.queries) * len(self.keys)


@dataclass(frozen=True)
class TopoMaskDescriptor:
    layout: PackLayout
    blocks: tuple
    valid: np.ndarray = None

    @property
    def length(self) -> int:
        return self.layout.length

    def allowed_entries(self) -> int:
        return sum(b.size for b in self.blocks)

    def expand(self) -> np.ndarray:
        out = np.zeros((self.length, self.length), dtype=bool)
        for b in self.blocks:
            out[np.ix_(b.queries, b.keys)] = True
        return out

    def pack_valid(self) -> np.ndarray:
        """(M, k*k) validity of each pack's patch slots."""
        lay = self.layout
        if self.valid is None:
            return np.ones((lay.num_packs, lay.k * lay.k), dtype=bool)
        cells = np.asarray(self.valid).reshape(lay.pack_rows, lay.k, lay.pack_cols, lay.k)
        return cells.transpose(0, 2, 1, 3).reshape(lay.num_packs, lay.k * lay.k)


def build_descriptor(layout: PackLayout, valid=None) -> TopoMaskDescriptor:
    """Decompose the mask into disjoint dense blocks.

    One N x 1 global column, M intra-pack blocks, M aggregation rows and one
    M x M summary block given by index lists. Padded keys are dropped from
    every block except the global column.
    """
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (layout.height, layout.width):
            raise ValueError("valid bitmap does not match layout")
    n = layout.length
    summaries = layout.summary_indices()
    patches = layout.patch_indices()
    blocks = [Block(Rule.GLOBAL_SINK, np.arange(n), np.array([0]))]
    desc = TopoMaskDescriptor(layout, (), valid)
    pv = desc.pack_valid()
    for m in range(layout.num_packs):
        live = patches[m][pv[m]]
        if len(live):
            blocks.append(Block(Rule.INTRA_PACK, live, live))
            blocks.append(Block(Rule.AGGREGATION, summaries[m:m + 1], live))
    blocks.append(Block(Rule.SUMMARY_LEVEL, summaries, summaries))
    return TopoMaskDescriptor(layout, tuple(blocks), valid)


def allowed_count(num_packs: int, k: int) -> int:
    if num_packs < 1 or k < 1:
        raise ValueError("num_packs and k must be >= 1")
    return num_packs * (k * k + 1) ** 2 + num_packs ** 2 + 1


def sparsity_ratio(num_packs: int, k: int) -> float:
    n = 1 + num_packs * (k * k + 1)
    return allowed_count(num_packs, k) / n ** 2


def flop_estimate(layout: PackLayout, d: int) -> dict:
    """Score plus value-aggregation cost, 4*d flops per attended entry."""
    if d < 1:
        raise ValueError("head dim must be >= 1")
    allowed = allowed_count(layout.num_packs, layout.k)
    sparse, dense = 4 * d * allowed, 4 * d * layout.length ** 2
    return {"sparse": sparse, "dense": dense, "ratio": sparse / dense}


def mask_stats(num_packs: int, k: int) -> dict:
    n = 1 + num_packs * (k * k + 1)
    allowed = allowed_count(num_packs, k)
    return {"M": num_packs, "k": k, "N": n, "allowed": allowed, "dense": n * n,
            "ratio": allowed / (n * n)}
