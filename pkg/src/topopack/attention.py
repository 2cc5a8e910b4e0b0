"""Topo-masked attention: a dense reference and the block-sparse kernel.

Arrays are ``(N, d)`` or ``(heads, N, d)``. The sparse kernel only forms the
score blocks the mask admits (global column, per-pack intra blocks, summary
aggregation rows and the summary x summary block) and never an N x N matrix.
"""
from __future__ import annotations

import numpy as np

from .numerics import Tape, Var, softmax_masked
from .topomask import TopoMaskDescriptor, dense_mask

__all__ = [
    "dense_oracle_attention",
    "sparse_attention",
    "sparse_attention_backward",
    "topo_attention",
]


def _as_heads(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected (N, d) or (heads, N, d), got shape {x.shape}")


def dense_oracle_attention(q, k, v, mask, valid=None, chunk: int = 512, counter: dict | None = None):
    """Reference masked attention computed row-chunk by row-chunk over all N keys.

    ``mask`` is an N x N boolean array or a :class:`TopoMaskDescriptor`.
    """
    q, squeeze = _as_heads(q)
    k, _ = _as_heads(k)
    v, _ = _as_heads(v)
    n, d = q.shape[1:]
    if k.shape[1] != n or v.shape[1] != n:
        raise ValueError("q, k, v must share the sequence length")
    scale = 1.0 / np.sqrt(d)
    out = np.empty((q.shape[0], n, v.shape[2]))
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        if isinstance(mask, TopoMaskDescriptor):
            if mask.length != n:
                raise ValueError(f"descriptor length {mask.length} != sequence length {n}")
            allowed = dense_mask(mask.layout, mask.valid, rows)
        else:
            allowed = np.asarray(mask, dtype=bool)[rows]
        scores = q[:, rows] @ np.swapaxes(k, 1, 2) * scale
        out[:, rows] = softmax_masked(scores, allowed[None]) @ v
        if counter is not None:
            counter["scores"] = counter.get("scores", 0) + scores.size
    return out[0] if squeeze else out


def _split(x, desc: TopoMaskDescriptor):
    lay = desc.layout
    return x[:, 0], x[:, lay.patch_indices()], x[:, lay.summary_indices()]


def _forward(q, k, v, desc: TopoMaskDescriptor):
    lay = desc.layout
    n, d = q.shape[1:]
    if n != desc.length or k.shape[1] != n or v.shape[1] != n:
        raise ValueError(f"sequence length {n} does not match descriptor length {desc.length}")
    scale = 1.0 / np.sqrt(d)
    pv = desc.pack_valid()                          # (M, P)
    pair = pv[:, :, None] & pv[:, None, :]          # (M, P, P)

    q0, qp, qs = _split(q, desc)
    k0, kp, ks = _split(k, desc)
    v0, vp, vs = _split(v, desc)

    # patch rows: global column + own pack
    s_pg = np.einsum("hmpd,hd->hmp", qp, k0) * scale
    s_pp = np.einsum("hmpd,hmqd->hmpq", qp, kp) * scale
    # summary rows: global column + own pack patches + all summaries
    s_sg = np.einsum("hmd,hd->hm", qs, k0) * scale
    s_sa = np.einsum("hmd,hmqd->hmq", qs, kp) * scale
    s_ss = np.einsum("hmd,hnd->hmn", qs, ks) * scale

    # two-pass: row max over every block the row touches, then exp-sum
    mx_p = np.maximum(s_pg, np.where(pair, s_pp, -np.inf).max(axis=-1))
    mx_s = np.maximum(np.maximum(s_sg, np.where(pv, s_sa, -np.inf).max(axis=-1)), s_ss.max(axis=-1))

    e_pg = np.exp(s_pg - mx_p)
    e_pp = np.where(pair, np.exp(np.where(pair, s_pp - mx_p[..., None], 0.0)), 0.0)
    z_p = e_pg + e_pp.sum(axis=-1)
    e_sg = np.exp(s_sg - mx_s)
    e_sa = np.where(pv, np.exp(np.where(pv, s_sa - mx_s[..., None], 0.0)), 0.0)
    e_ss = np.exp(s_ss - mx_s[..., None])
    z_s = e_sg + e_sa.sum(axis=-1) + e_ss.sum(axis=-1)

    p_pg, p_pp = e_pg / z_p, e_pp / z_p[..., None]
    p_sg, p_sa, p_ss = e_sg / z_s, e_sa / z_s[..., None], e_ss / z_s[..., None]

    out = np.empty((q.shape[0], n, v.shape[2]))
    out[:, 0] = v0
    out[:, lay.patch_indices()] = p_pg[..., None] * v0[:, None, None] + p_pp @ vp
    out[:, lay.summary_indices()] = (p_sg[..., None] * v0[:, None]
                                     + np.einsum("hmq,hmqd->hmd", p_sa, vp) + p_ss @ vs)
    entries = n + int(pair.sum()) + int(pv.sum()) + lay.num_packs ** 2
    ctx = (p_pg, p_pp, p_sg, p_sa, p_ss, scale)
    return out, ctx, entries


def sparse_attention(q, k, v, desc: TopoMaskDescriptor, counter: dict | None = None) -> np.ndarray:
    """Block-sparse masked attention; numerically equal to the dense oracle.

    If ``counter`` is given, ``counter["scores"]`` is incremented by the
    number of admitted score entries evaluated (per head).
    """
    qh, squeeze = _as_heads(q)
    kh, _ = _as_heads(k)
    vh, _ = _as_heads(v)
    out, _, entries = _forward(qh, kh, vh, desc)
    if counter is not None:
        counter["scores"] = counter.get("scores", 0) + entries * qh.shape[0]
    return out[0] if squeeze else out


def sparse_attention_backward(g, q, k, v, desc: TopoMaskDescriptor, ctx):
    """Gradients w.r.t. (q, k, v) given upstream ``g``, all ``(heads, N, d)``."""
    lay = desc.layout
    p_pg, p_pp, p_sg, p_sa, p_ss, scale = ctx
    pidx, sidx = lay.patch_indices(), lay.summary_indices()
    g0, gp, gs = _split(g, desc)
    q0, qp, qs = _split(q, desc)
    k0, kp, ks = _split(k, desc)
    v0, vp, vs = _split(v, desc)

    # d(score) = p * (dp - <dp, p>) per row
    dp_pg = np.einsum("hmpd,hd->hmp", gp, v0)
    dp_pp = gp @ np.swapaxes(vp, -1, -2)
    row_p = p_pg * dp_pg + (p_pp * dp_pp).sum(axis=-1)
    ds_pg = p_pg * (dp_pg - row_p) * scale
    ds_pp = p_pp * (dp_pp - row_p[..., None]) * scale

    dp_sg = np.einsum("hmd,hd->hm", gs, v0)
    dp_sa = np.einsum("hmd,hmqd->hmq", gs, vp)
    dp_ss = gs @ np.swapaxes(vs, -1, -2)
    row_s = p_sg * dp_sg + (p_sa * dp_sa).sum(axis=-1) + (p_ss * dp_ss).sum(axis=-1)
    ds_sg = p_sg * (dp_sg - row_s) * scale
    ds_sa = p_sa * (dp_sa - row_s[..., None]) * scale
    ds_ss = p_ss * (dp_ss - row_s[..., None]) * scale

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dq[:, pidx] = ds_pg[..., None] * k0[:, None, None] + ds_pp @ kp
    dq[:, sidx] = ds_sg[..., None] * k0[:, None] + np.einsum("hmq,hmqd->hmd", ds_sa, kp) + ds_ss @ ks

    dk[:, 0] = np.einsum("hmp,hmpd->hd", ds_pg, qp) + np.einsum("hm,hmd->hd", ds_sg, qs)
    dk[:, pidx] = np.swapaxes(ds_pp, -1, -2) @ qp + np.einsum("hmq,hmd->hmqd", ds_sa, qs)
    dk[:, sidx] = np.swapaxes(ds_ss, -1, -2) @ qs

    dv[:, 0] = g0 + np.einsum("hmp,hmpd->hd", p_pg, gp) + np.einsum("hm,hmd->hd", p_sg, gs)
    dv[:, pidx] = np.swapaxes(p_pp, -1, -2) @ gp + np.einsum("hmq,hmd->hmqd", p_sa, gs)
    dv[:, sidx] = np.swapaxes(p_ss, -1, -2) @ gs
    return dq, dk, dv


def topo_attention(tape: Tape, q: Var, k: Var, v: Var, desc: TopoMaskDescriptor) -> Var:
    """Record block-sparse attention on ``tape``; inputs are ``(heads, N, d)``."""
    def forward(qv, kv, vv):
        out, ctx, _ = _forward(qv, kv, vv, desc)
        return out, ctx

    def vjp(g, ctx, qv, kv, vv):
        return sparse_attention_backward(g, qv, kv, vv, desc, ctx)

    return tape.record(forward, (q, k, v), vjp)
