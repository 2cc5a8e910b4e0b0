"""Self-check suite behind ``topopack check``: mask counting, oracle
equivalence and gradient checks, each reported with its measured value."""
from __future__ import annotations

import numpy as np

from .attention import dense_oracle_attention, sparse_attention, topo_attention
from .connector import ResamplerConfig, init_resampler_params, resample_graph
from .encoder import EncoderConfig, encoder_graph, init_encoder_params
from .grid import build_layout
from .numerics import grad_check
from .pretrain import infonce_loss
from .topomask import allowed_count, build_descriptor, dense_mask, mask_entry, sparsity_ratio


def _result(name, passed, **measured):
    return {"name": name, "pass": bool(passed), **measured}


def check_sparsity_claim():
    ratio = sparsity_ratio(1000, 3)
    return _result("sparsity_ratio_M1000_k3", allowed_count(1000, 3) == 1_100_001 and abs(ratio - 0.0110) < 5e-4,
                   allowed=allowed_count(1000, 3), ratio=ratio)


def check_counting(max_n: int = 400):
    bad = 0
    for k in (1, 2, 3):
        for m in range(1, max_n):
            n = 1 + m * (k * k + 1)
            if n > max_n:
                break
            lay = build_layout(k, k * m, k)
            bad += int(dense_mask(lay).sum() != allowed_count(m, k))
            bad += int(build_descriptor(lay).allowed_entries() != allowed_count(m, k))
    return _result("allowed_count_matches_enumeration", bad == 0, mismatches=bad)


def check_rule_scan():
    lay = build_layout(6, 6, 3)
    n = lay.length
    brute = np.array([[mask_entry(lay, i, j) for j in range(n)] for i in range(n)])
    ok = np.array_equal(brute, build_descriptor(lay).expand()) and brute[:, 0].all()
    return _result("mask_rule_scan_M4_k3", ok, entries=int(brute.sum()))


def check_oracle(instances: int = 40, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        k = int(rng.choice([2, 3]))
        lay = build_layout(k, k * int(rng.integers(1, 9)), k)
        d = int(rng.integers(1, 17))
        q, kk, v = rng.standard_normal((3, lay.length, d))
        desc = build_descriptor(lay)
        worst = max(worst, float(np.abs(sparse_attention(q, kk, v, desc)
                                        - dense_oracle_attention(q, kk, v, dense_mask(lay))).max()))
    return _result("sparse_matches_dense", worst < 1e-10, max_abs_dev=worst)


def check_infonce():
    q = np.array([1.0, 0.0, 0.0])
    loss = infonce_loss(q, q, np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), 1.0)
    return _result("infonce_orthogonal_negatives", abs(loss - np.log1p(2 * np.exp(-1))) < 1e-9, loss=loss)


def check_gradients(seed: int = 0):
    rng = np.random.default_rng(seed)
    lay = build_layout(2, 4, 2)
    desc = build_descriptor(lay)
    cfg = EncoderConfig(dim=4, layers=1, heads=1, k=2, seed=seed)
    params = init_encoder_params(cfg)
    names = list(params)
    x = rng.standard_normal((lay.length, 4))
    w = rng.standard_normal((lay.length, 4))

    def enc_f(tape, *vals):
        out = encoder_graph(tape, tape.const(x), dict(zip(names, vals)), cfg, desc)
        return tape.sum(tape.mul(out, w))

    q, k, v = rng.standard_normal((3, 1, lay.length, 4))

    def att_f(tape, q, k, v):
        return tape.sum(tape.mul(topo_attention(tape, q, k, v, desc), w[None]))

    rcfg = ResamplerConfig(in_dim=3, out_dim=2, queries=2, layers=1, seed=seed)
    rparams = init_resampler_params(rcfg)
    rnames = list(rparams)
    summ = rng.standard_normal((5, 3))
    rw = rng.standard_normal((2, 2))

    def res_f(tape, *vals):
        return tape.sum(tape.mul(resample_graph(tape, summ, dict(zip(rnames, vals)), rcfg), rw))

    errors = {"attention": grad_check(att_f, [q, k, v]),
              "encoder": grad_check(enc_f, list(params.values())),
              "resampler": grad_check(res_f, list(rparams.values()))}
    return _result("grad_check", max(errors.values()) < 1e-6, **errors)


def run_all() -> list:
    return [check_sparsity_claim(), check_counting(), check_rule_scan(), check_oracle(),
            check_infonce(), check_gradients()]
