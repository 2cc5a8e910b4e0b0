"""Two-phase MAE curriculum and feature-level MoCo for the topo-pack encoder.

Phase 1 masks individual patches while every pack keeps at least one visible
patch; phase 2 masks whole packs. The reconstruction target is the input
feature of each masked patch.

MoCo builds positives by adding Gaussian noise to token features, encodes
them with an EMA key encoder and contrasts summary-token embeddings against a
FIFO queue of earlier keys with InfoNCE.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .encoder import EncoderConfig, as_vars, encoder_graph, init_encoder_params
from .grid import PackLayout, Role, TokenSequence
from .numerics import Tape, Var
from .optim import SGD
from .topomask import TopoMaskDescriptor, build_descriptor

__all__ = [
    "Phase",
    "MaeMask",
    "sample_mae_mask",
    "mae_reconstruction_loss",
    "masked_input",
    "init_mae_params",
    "mae_graph",
    "mae_loss_graph",
    "MoCoState",
    "init_moco_state",
    "momentum_update",
    "noise_positive",
    "infonce_loss",
    "infonce_graph",
    "moco_embed_graph",
    "moco_step",
]


class Phase(str, enum.Enum):
    PATCH_WISE = "patch"
    PACK_WISE = "pack"


@dataclass(frozen=True)
class MaeMask:
    phase: Phase
    indices: np.ndarray  # sorted masked token indices, patch tokens only
    ratio: float
    seed: int
    clamped: bool = False

    def __len__(self):
        return len(self.indices)


def _pack_valid(layout: PackLayout, valid) -> np.ndarray:
    if valid is None:
        return np.ones((layout.num_packs, layout.k * layout.k), dtype=bool)
    k = layout.k
    cells = np.asarray(valid, dtype=bool).reshape(layout.pack_rows, k, layout.pack_cols, k)
    return cells.transpose(0, 2, 1, 3).reshape(layout.num_packs, k * k)


def sample_mae_mask(layout: PackLayout, phase, ratio: float, valid=None, seed: int = 0) -> MaeMask:
    """Draw a curriculum mask.

    Patch-wise draws ``floor(ratio * maskable)`` valid patches by rejection,
    refusing picks that would hide a pack's last visible patch; when that
    target is unreachable it is clamped to every pack keeping exactly one
    visible patch. Pack-wise draws ``floor(ratio * M)`` packs among those
    holding valid patches and masks all of their valid patches.
    """
    phase = Phase(phase)
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    rng = np.random.default_rng(seed)
    pidx = layout.patch_indices()
    pv = _pack_valid(layout, valid)
    clamped = False
    if phase is Phase.PATCH_WISE:
        maskable = pidx[pv]
        target = int(np.floor(ratio * len(maskable)))
        limit = int(np.maximum(pv.sum(axis=1) - 1, 0).sum())
        if target > limit:
            target, clamped = limit, True
        visible = pv.sum(axis=1)
        chosen = []
        for t in rng.permutation(maskable):
            if len(chosen) == target:
                break
            m = (t - 1) // layout.tokens_per_pack
            if visible[m] > 1:
                visible[m] -= 1
                chosen.append(t)
        indices = np.sort(np.asarray(chosen, dtype=np.intp))
    else:
        live = np.flatnonzero(pv.any(axis=1))
        count = min(int(np.floor(ratio * layout.num_packs)), len(live))
        packs = np.sort(rng.choice(live, size=count, replace=False))
        indices = np.sort(pidx[packs][pv[packs]]).astype(np.intp)
    return MaeMask(phase, indices, float(ratio), seed, clamped)


def mae_reconstruction_loss(predicted, target, mask: MaeMask) -> float:
    """Mean squared error over masked tokens and all feature dims."""
    predicted, target = np.asarray(predicted), np.asarray(target)
    if predicted.shape != target.shape:
        raise ValueError("predicted and target shapes differ")
    if len(mask.indices) == 0:
        raise ValueError("nothing to reconstruct")
    diff = predicted[mask.indices] - target[mask.indices]
    return float(np.mean(diff * diff))


def masked_input(seq: TokenSequence, mask: MaeMask) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings with summary and global tokens rebuilt from visible patches
    only, and a 0/1 column marking masked rows."""
    lay = seq.layout
    emb = seq.embeddings.copy()
    hidden = np.zeros(lay.length)
    hidden[mask.indices] = 1.0
    seen = (seq.roles == Role.PATCH) & (hidden == 0)
    pidx = lay.patch_indices()
    w = seen[pidx].astype(np.float64)
    sums = np.einsum("mp,mpd->md", w, emb[pidx])
    emb[lay.summary_indices()] = sums / np.maximum(w.sum(axis=1, keepdims=True), 1.0)
    emb[0] = sums.sum(axis=0) / max(w.sum(), 1.0)
    emb[mask.indices] = 0.0
    return emb, hidden[:, None]


def init_mae_params(config: EncoderConfig, seed: int | None = None) -> dict:
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    D = config.dim
    dec_cfg = _decoder_config(config)
    params = init_encoder_params(config, seed, prefix="enc.")
    params["mask_emb"] = 0.02 * rng.standard_normal(D)
    params.update(init_encoder_params(dec_cfg, seed + 1, prefix="dec."))
    params["head_w"] = rng.standard_normal((D, D)) / np.sqrt(D)
    params["head_b"] = np.zeros(D)
    return params


def _decoder_config(config: EncoderConfig) -> EncoderConfig:
    return EncoderConfig(dim=config.dim, layers=1, heads=config.heads, ff_dim=config.ff_dim,
                         k=config.k, seed=config.seed, positional=config.positional)


def mae_graph(tape: Tape, seq: TokenSequence, mask: MaeMask, params: dict,
              config: EncoderConfig, desc: TopoMaskDescriptor) -> Var:
    """Predicted token features (N x D) for a masked sequence."""
    emb, hidden = masked_input(seq, mask)
    x = tape.add(tape.const(emb), tape.mul(hidden, params["mask_emb"]))
    x = encoder_graph(tape, x, params, config, desc, seq.roles, prefix="enc.")
    x = encoder_graph(tape, x, params, _decoder_config(config), desc, seq.roles, prefix="dec.")
    return tape.add(tape.matmul(x, params["head_w"]), params["head_b"])


def mae_loss_graph(tape: Tape, seq: TokenSequence, mask: MaeMask, params: dict,
                   config: EncoderConfig, desc: TopoMaskDescriptor) -> Var:
    if len(mask.indices) == 0:
        raise ValueError("nothing to reconstruct")
    pred = mae_graph(tape, seq, mask, params, config, desc)
    diff = tape.sub(tape.gather(pred, mask.indices), seq.embeddings[mask.indices])
    return tape.mean(tape.square(diff))


# -- MoCo --------------------------------------------------------------------

@dataclass
class MoCoState:
    query: dict
    key: dict
    config: EncoderConfig
    capacity: int = 1024
    tau: float = 0.07
    momentum: float = 0.99
    sigma: float = 0.1
    queue: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.queue is None:
            dim = self.query["proj_w"].shape[1]
            self.queue = np.zeros((0, dim))

    def enqueue(self, keys: np.ndarray) -> None:
        """Push rows (re-normalised), evicting the oldest beyond capacity."""
        keys = keys / np.linalg.norm(keys, axis=1, keepdims=True)
        q = np.concatenate([self.queue, keys], axis=0)
        self.queue = q[max(len(q) - self.capacity, 0):]


def init_moco_state(config: EncoderConfig, encoder_params: dict | None = None, proj_dim: int | None = None,
                    seed: int = 0, **kwargs) -> MoCoState:
    """Query and key encoders start identical; ``encoder_params`` (``enc.*``
    names) may come from an MAE checkpoint."""
    rng = np.random.default_rng([seed, 2])
    proj_dim = proj_dim or config.dim
    query = dict(encoder_params) if encoder_params is not None else init_encoder_params(config, seed, prefix="enc.")
    query = {k: v for k, v in query.items() if k.startswith("enc.")}
    query["proj_w"] = rng.standard_normal((config.dim, proj_dim)) / np.sqrt(config.dim)
    key = {k: v.copy() for k, v in query.items()}
    return MoCoState(query=query, key=key, config=config, **kwargs)


def momentum_update(state: MoCoState) -> dict:
    """theta_k <- m * theta_k + (1 - m) * theta_q, elementwise."""
    m = state.momentum
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    state.key = {name: m * state.key[name] + (1.0 - m) * state.query[name] for name in state.key}
    return state.key


def noise_positive(features, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    features = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return features + sigma * rng.standard_normal(features.shape)


def infonce_loss(query, positive, queue, tau: float) -> float:
    """-log softmax of the positive logit among [q.k+, q.k-...] / tau."""
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    query = np.asarray(query, dtype=np.float64)
    queue = np.asarray(queue, dtype=np.float64).reshape(-1, len(query))
    logits = np.concatenate([[query @ np.asarray(positive)], queue @ query]) / tau
    return float(logsumexp(logits) - logits[0])


def moco_embed_graph(tape: Tape, x, params: dict, config: EncoderConfig,
                     desc: TopoMaskDescriptor, roles=None) -> Var:
    """Unit-norm projected summary embeddings, (M, proj_dim)."""
    out = encoder_graph(tape, tape._as_var(x), params, config, desc, roles, prefix="enc.")
    summ = tape.gather(out, desc.layout.summary_indices())
    return tape.normalize_rows(tape.matmul(summ, params["proj_w"]))


def infonce_graph(tape: Tape, q: Var, k_pos: np.ndarray, queue: np.ndarray, tau: float) -> Var:
    """Mean InfoNCE over rows of ``q`` against matching ``k_pos`` rows."""
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    pos = tape.matmul(tape.mul(q, k_pos), np.ones((q.shape[1], 1)))
    logits = pos if len(queue) == 0 else tape.concat([pos, tape.matmul(q, queue.T)], axis=1)
    logp = tape.log_softmax(tape.scale(logits, 1.0 / tau))
    onehot = np.zeros(logp.shape)
    onehot[:, 0] = 1.0
    return tape.scale(tape.sum(tape.mul(logp, onehot)), -1.0 / q.shape[0])


def moco_step(state: MoCoState, seq: TokenSequence, optimizer: SGD, seed: int,
              desc: TopoMaskDescriptor | None = None) -> float:
    """One MoCo update on ``seq``; returns the loss before the update."""
    desc = build_descriptor(seq.layout, seq.valid) if desc is None else desc
    live = (seq.roles != Role.PADDED_PATCH)[:, None]
    positive = np.where(live, noise_positive(seq.embeddings, state.sigma, seed), 0.0)

    ktape = Tape()
    keys = moco_embed_graph(ktape, positive, as_vars(ktape, state.key), state.config, desc, seq.roles).value

    tape = Tape()
    qvars = as_vars(tape, state.query)
    q = moco_embed_graph(tape, seq.embeddings, qvars, state.config, desc, seq.roles)
    loss = infonce_graph(tape, q, keys, state.queue, state.tau)
    if not np.isfinite(loss.value):
        raise FloatingPointError("non-finite MoCo loss")
    tape.backward(loss)
    optimizer.step(state.query, {name: v.grad for name, v in qvars.items()})
    momentum_update(state)
    state.enqueue(keys)
    return float(loss.value)
