"""Learnable-query cross-attention resampler.

A fixed set of query vectors cross-attends to a variable-length sequence of
summary tokens, so the output always has ``queries`` rows whatever the input
length. Without positional encoding the output ignores input order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import _sinusoid, as_vars
from .numerics import Tape, Var
from .optim import SGD

__all__ = ["ResamplerConfig", "init_resampler_params", "resample_graph", "resample", "alignment_train"]


@dataclass(frozen=True)
class ResamplerConfig:
    in_dim: int
    out_dim: int
    queries: int = 32
    width: int = None
    layers: int = 2
    heads: int = 1
    positional: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.width is None:
            object.__setattr__(self, "width", self.in_dim)
        if min(self.queries, self.in_dim, self.out_dim, self.width, self.layers, self.heads) < 1:
            raise ValueError("resampler dimensions must be >= 1")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")


def init_resampler_params(config: ResamplerConfig, seed: int | None = None, zero_head: bool = False) -> dict:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    W, F = config.width, 2 * config.width
    p = {
        "conn.queries": rng.standard_normal((config.queries, W)),
        "conn.in_w": rng.standard_normal((config.in_dim, W)) / np.sqrt(config.in_dim),
        "conn.in_b": np.zeros(W),
    }
    for layer in range(config.layers):
        n = f"conn.l{layer}."
        for ln in ("lnq", "lnk", "ln2"):
            p[n + ln + "_g"] = np.ones(W)
            p[n + ln + "_b"] = np.zeros(W)
        for w in ("wq", "wk", "wv", "wo"):
            p[n + w] = rng.standard_normal((W, W)) / np.sqrt(W)
        p[n + "w1"] = rng.standard_normal((W, F)) / np.sqrt(W)
        p[n + "b1"] = np.zeros(F)
        p[n + "w2"] = rng.standard_normal((F, W)) / np.sqrt(F)
        p[n + "b2"] = np.zeros(W)
    p["conn.out_w"] = (np.zeros((W, config.out_dim)) if zero_head
                       else rng.standard_normal((W, config.out_dim)) / np.sqrt(W))
    p["conn.out_b"] = np.zeros(config.out_dim)
    return p


def resample_graph(tape: Tape, x, params: dict, config: ResamplerConfig) -> Var:
    x = tape._as_var(x)
    L = x.shape[0]
    if L == 0:
        raise ValueError("empty summary sequence")
    Q, W, h = config.queries, config.width, config.heads
    hd = W // h
    mem = tape.add(tape.matmul(x, params["conn.in_w"]), params["conn.in_b"])
    if config.positional:
        mem = tape.add(mem, _sinusoid(np.arange(L, dtype=np.float64), W))
    qry = params["conn.queries"]
    every = np.ones((1, Q, L), dtype=bool)
    for layer in range(config.layers):
        n = f"conn.l{layer}."
        qn = tape.layer_norm(qry, params[n + "lnq_g"], params[n + "lnq_b"])
        kn = tape.layer_norm(mem, params[n + "lnk_g"], params[n + "lnk_b"])
        q = tape.transpose(tape.reshape(tape.matmul(qn, params[n + "wq"]), (Q, h, hd)), (1, 0, 2))
        k = tape.transpose(tape.reshape(tape.matmul(kn, params[n + "wk"]), (L, h, hd)), (1, 2, 0))
        v = tape.transpose(tape.reshape(tape.matmul(kn, params[n + "wv"]), (L, h, hd)), (1, 0, 2))
        att = tape.softmax_masked(tape.scale(tape.matmul(q, k), 1.0 / np.sqrt(hd)), every)
        ctx = tape.reshape(tape.transpose(tape.matmul(att, v), (1, 0, 2)), (Q, W))
        qry = tape.add(qry, tape.matmul(ctx, params[n + "wo"]))
        qn = tape.layer_norm(qry, params[n + "ln2_g"], params[n + "ln2_b"])
        ff = tape.gelu(tape.add(tape.matmul(qn, params[n + "w1"]), params[n + "b1"]))
        qry = tape.add(qry, tape.add(tape.matmul(ff, params[n + "w2"]), params[n + "b2"]))
    return tape.add(tape.matmul(qry, params["conn.out_w"]), params["conn.out_b"])


def resample(summaries, config: ResamplerConfig, params: dict) -> np.ndarray:
    """Condense an (L, in_dim) sequence into (queries, out_dim)."""
    summaries = np.asarray(summaries, dtype=np.float64)
    if summaries.ndim != 2 or summaries.shape[0] == 0:
        raise ValueError("empty summary sequence")
    tape = Tape()
    return resample_graph(tape, tape.const(summaries), as_vars(tape, params), config).value


def alignment_loss_graph(tape: Tape, corpus, params: dict, config: ResamplerConfig) -> Var:
    """Mean over pairs of the squared distance between the query-pooled
    output and the target embedding."""
    total = None
    for seq, target in corpus:
        pooled = tape.mean_rows(resample_graph(tape, seq, params, config))
        dist = tape.sum(tape.square(tape.sub(pooled, target)))
        total = dist if total is None else tape.add(total, dist)
    return tape.scale(total, 1.0 / len(corpus))


def alignment_train(corpus, config: ResamplerConfig, steps: int = 500, lr: float = 0.05,
                    momentum: float = 0.0, params: dict | None = None, callback=None,
                    clip_norm: float | None = 1.0):
    """Full-batch gradient descent on the alignment proxy.

    Returns ``(params, losses)`` where ``losses[i]`` is the loss before step i.
    """
    corpus = [(np.asarray(s, dtype=np.float64), np.asarray(t, dtype=np.float64)) for s, t in corpus]
    if not corpus:
        raise ValueError("empty alignment corpus")
    params = dict(init_resampler_params(config) if params is None else params)
    opt = SGD(lr, momentum, clip_norm)
    losses = []
    for step in range(steps):
        tape = Tape()
        pv = as_vars(tape, params)
        loss = alignment_loss_graph(tape, corpus, pv, config)
        value = float(loss.value)
        if not np.isfinite(value):
            raise FloatingPointError(f"alignment loss diverged at step {step}")
        losses.append(value)
        if callback is not None:
            callback(step, value)
        tape.backward(loss)
        opt.step(params, {n: v.grad for n, v in pv.items()})
    return params, losses
