"""Stage runners for the pretraining pipeline: mae1 -> mae2 -> moco -> connector.

Each stage takes a corpus of feature grids and optionally the tensors of the
previous stage's checkpoint, and returns ``(tensors, meta, log)`` where
``log`` holds one dict per step.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .connector import ResamplerConfig, alignment_train, init_resampler_params
from .encoder import EncoderConfig, as_vars, encoder_forward, init_encoder_params, sequence_from_grid
from .grid import Role
from .numerics import Tape
from .optim import SGD
from .pretrain import (Phase, init_mae_params, init_moco_state, mae_loss_graph, moco_embed_graph,
                       moco_step, noise_positive, sample_mae_mask)
from .topomask import build_descriptor

__all__ = ["STAGES", "TrainConfig", "run_stage", "loss_improved"]

STAGES = ("mae1", "mae2", "moco", "connector")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 500
    lr: float = 0.02
    optimizer_momentum: float = 0.9
    k: int = 3
    dim: int = 16
    layers: int = 2
    heads: int = 2
    ratio: float | None = None   # None -> 0.5 for mae1, 0.3 for mae2
    tau: float = 0.07
    momentum: float = 0.99
    sigma: float = 0.1
    queue: int = 1024
    queries: int = 32
    include_global: bool = True
    clip_norm: float | None = 1.0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(dim=self.dim, layers=self.layers, heads=self.heads, k=self.k, seed=self.seed)

    def mask_ratio(self, stage: str) -> float:
        if self.ratio is not None:
            return self.ratio
        return 0.5 if stage == "mae1" else 0.3


def loss_improved(losses, window: int | None = None) -> bool:
    """Mean of the last window is strictly below the mean of the first."""
    losses = np.asarray(losses, dtype=np.float64)
    window = window or max(1, len(losses) // 10)
    return bool(losses[-window:].mean() < losses[:window].mean())


def _prepare(corpus, k: int):
    seqs = [sequence_from_grid(g, k) for g in corpus]
    descs = [build_descriptor(s.layout, s.valid) for s in seqs]
    return seqs, descs


def _step_seed(seed: int, stage: str, step: int) -> int:
    return int(np.random.SeedSequence([seed, STAGES.index(stage), step]).generate_state(1)[0])


def _run_mae(stage, seqs, descs, cfg: TrainConfig, params, log_fn):
    enc = cfg.encoder_config()
    full = init_mae_params(enc, cfg.seed)
    if params:
        full.update({k: v for k, v in params.items() if k in full})
    params = full
    phase = Phase.PATCH_WISE if stage == "mae1" else Phase.PACK_WISE
    ratio = cfg.mask_ratio(stage)
    opt = SGD(cfg.lr, cfg.optimizer_momentum, cfg.clip_norm)
    log = []
    for step in range(cfg.steps):
        i = step % len(seqs)
        seq, desc = seqs[i], descs[i]
        mask = sample_mae_mask(seq.layout, phase, ratio, seq.valid, _step_seed(cfg.seed, stage, step))
        if len(mask) == 0:
            raise ValueError(f"mask ratio {ratio} masks nothing on a {seq.layout.num_packs}-pack grid")
        tape = Tape()
        pv = as_vars(tape, params)
        loss = mae_loss_graph(tape, seq, mask, pv, enc, desc)
        value = float(loss.value)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        tape.backward(loss)
        opt.step(params, {n: v.grad for n, v in pv.items()})
        entry = {"step": step, "loss": value, "phase": stage, "queue_len": 0}
        log.append(entry)
        if log_fn:
            log_fn(entry)
    return params, log


def _run_moco(seqs, descs, cfg: TrainConfig, params, log_fn):
    enc = cfg.encoder_config()
    state = init_moco_state(enc, encoder_params=params or None, seed=cfg.seed, capacity=cfg.queue,
                            tau=cfg.tau, momentum=cfg.momentum, sigma=cfg.sigma)
    if params and "proj_w" in params:
        state.query["proj_w"] = params["proj_w"].copy()
        state.key = {k: v.copy() for k, v in state.query.items()}
    # prime the queue with key embeddings of the corpus so early losses see negatives
    for i, (seq, desc) in enumerate(zip(seqs, descs)):
        tape = Tape()
        pos = noise_positive(seq.embeddings, cfg.sigma, _step_seed(cfg.seed, "moco", cfg.steps + i))
        state.enqueue(moco_embed_graph(tape, pos, as_vars(tape, state.key), enc, desc, seq.roles).value)
    opt = SGD(cfg.lr, cfg.optimizer_momentum, cfg.clip_norm)
    log = []
    for step in range(cfg.steps):
        i = step % len(seqs)
        value = moco_step(state, seqs[i], opt, _step_seed(cfg.seed, "moco", step), descs[i])
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        entry = {"step": step, "loss": value, "phase": "moco", "queue_len": len(state.queue)}
        log.append(entry)
        if log_fn:
            log_fn(entry)
    tensors = dict(state.query)
    tensors.update({"key." + k: v for k, v in state.key.items()})
    tensors["queue"] = state.queue
    return tensors, log


def connector_corpus(seqs, descs, cfg: TrainConfig, params):
    """(summary outputs, proxy target) pairs from the frozen encoder."""
    enc = cfg.encoder_config()
    enc_params = {k: v for k, v in params.items() if k.startswith("enc.")}
    if not enc_params:
        enc_params = init_encoder_params(enc, cfg.seed, prefix="enc.")
    plain = {k[len("enc."):]: v for k, v in enc_params.items()}
    proj = np.random.default_rng([cfg.seed, 3]).standard_normal((cfg.dim, cfg.dim)) / np.sqrt(cfg.dim)
    pairs = []
    for seq, desc in zip(seqs, descs):
        out = encoder_forward(seq, enc, plain, desc)
        tokens = out.summaries
        if cfg.include_global:
            tokens = np.vstack([out.global_token, tokens])
        live = seq.token_valid
        target = proj @ seq.embeddings[live & (seq.roles == Role.PATCH)].mean(axis=0)
        pairs.append((tokens, target))
    return pairs


def _run_connector(seqs, descs, cfg: TrainConfig, params, log_fn):
    params = params or {}
    pairs = connector_corpus(seqs, descs, cfg, params)
    rcfg = ResamplerConfig(in_dim=cfg.dim, out_dim=cfg.dim, queries=cfg.queries, seed=cfg.seed)
    init = init_resampler_params(rcfg)
    init.update({k: v for k, v in params.items() if k in init})

    def cb(step, value):
        if log_fn:
            log_fn({"step": step, "loss": value, "phase": "connector", "queue_len": 0})

    conn, losses = alignment_train(pairs, rcfg, steps=cfg.steps, lr=cfg.lr,
                                   momentum=cfg.optimizer_momentum, params=init, callback=cb,
                                   clip_norm=cfg.clip_norm)
    log = [{"step": s, "loss": v, "phase": "connector", "queue_len": 0} for s, v in enumerate(losses)]
    tensors = {k: v for k, v in params.items() if k.startswith("enc.")}
    tensors.update(conn)
    return tensors, log


def run_stage(stage: str, corpus, cfg: TrainConfig, init_tensors: dict | None = None, log_fn=None):
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if not corpus:
        raise ValueError("empty corpus")
    seqs, descs = _prepare(corpus, cfg.k)
    if stage in ("mae1", "mae2"):
        tensors, log = _run_mae(stage, seqs, descs, cfg, init_tensors, log_fn)
    elif stage == "moco":
        tensors, log = _run_moco(seqs, descs, cfg, init_tensors, log_fn)
    else:
        tensors, log = _run_connector(seqs, descs, cfg, init_tensors, log_fn)
    meta = {"stage": stage, "config": asdict(cfg)}
    return tensors, meta, log
