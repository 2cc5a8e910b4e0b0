"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line
with the measured values. Run with ``pytest tests/test_acceptance.py -s``
(the lines are printed even without ``-s``)."""
import itertools
import time
from fractions import Fraction

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from topopack.attention import dense_oracle_attention, sparse_attention, topo_attention
from topopack.checkpoint import load_checkpoint, save_checkpoint
from topopack.connector import ResamplerConfig, alignment_loss_graph, init_resampler_params, resample
from topopack.encoder import EncoderConfig, encoder_graph, init_encoder_params, sequence_from_grid
from topopack.grid import FeatureGrid, build_layout, read_fgrid, write_fgrid
from topopack.numerics import grad_check
from topopack.pretrain import (Phase, infonce_graph, infonce_loss, init_mae_params, init_moco_state,
                               mae_loss_graph, moco_embed_graph, sample_mae_mask)
from topopack.roi import build_similarity_graph, mst_cluster, spanning_tree
from topopack.synth import synthetic_corpus, synthetic_grid
from topopack.topomask import allowed_count, build_descriptor, dense_mask, mask_entry, sparsity_ratio
from topopack.train import STAGES, TrainConfig, loss_improved, run_stage


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, **measured):
        detail = ", ".join(f"{k}={v}" for k, v in measured.items())
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title} [{detail}]")
        assert ok, f"criterion {number} failed: {detail}"
    return emit


def rule_oracle(m, k, valid_tokens=None):
    """Allowed-pair matrix straight from the four rules, built from token
    arithmetic alone (no layout object)."""
    per = k * k + 1
    n = 1 + m * per
    t = np.arange(n)
    pack = np.where(t == 0, -1, (t - 1) // per)
    slot = np.where(t == 0, -1, (t - 1) % per)
    patch = (t > 0) & (slot < k * k)
    summary = (t > 0) & (slot == k * k)
    same = pack[:, None] == pack[None, :]
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:, 0] = True
    allowed |= patch[:, None] & patch[None, :] & same
    allowed |= summary[:, None] & patch[None, :] & same
    allowed |= summary[:, None] & summary[None, :]
    if valid_tokens is not None:
        allowed[:, ~valid_tokens] = False
        allowed[~valid_tokens, 1:] = False
    return allowed


def layouts_up_to(n_max, ks=(1, 2, 3, 4)):
    for k in ks:
        m = 1
        while 1 + m * (k * k + 1) <= n_max:
            yield m, k
            m += 1


# 1 ---------------------------------------------------------------------------

def test_criterion_1_sparsity_claim(report):
    t0 = time.perf_counter()
    mismatches, layouts = 0, 0
    for m, k in layouts_up_to(1000):
        brute = int(rule_oracle(m, k).sum())
        closed = allowed_count(m, k)
        mismatches += int(brute != closed)
        mismatches += int(Fraction(brute, (1 + m * (k * k + 1)) ** 2) != Fraction(closed, (1 + m * (k * k + 1)) ** 2))
        layouts += 1
    for m in (1, 2, 7, 40):
        mismatches += int(dense_mask(build_layout(3, 3 * m, 3)).sum() != allowed_count(m, 3))
    formula_ok = all(
        sparsity_ratio(m, 3) == pytest.approx(float(Fraction(100 * m + m * m + 1, (10 * m + 1) ** 2)), rel=1e-15)
        for m in (1, 10, 1000, 10 ** 6))
    r1000 = sparsity_ratio(1000, 3)
    tail = [sparsity_ratio(m, 3) for m in (10 ** 4, 10 ** 5, 10 ** 6, 10 ** 7)]
    converging = all(a > b > 0.01 for a, b in zip(tail, tail[1:])) and tail[-1] - 0.01 < 2e-5
    elapsed = time.perf_counter() - t0
    ok = (mismatches == 0 and formula_ok and allowed_count(1000, 3) == 1_100_001 and round(r1000, 4) == 0.0110
          and converging and elapsed < 10)
    report(1, "sparsity ratio closed form", ok, layouts=layouts, mismatches=mismatches,
           ratio_M1000=f"{r1000:.6f}", ratio_M1e7=f"{tail[-1]:.6f}", seconds=f"{elapsed:.2f}")


# 2 ---------------------------------------------------------------------------

def test_criterion_2_oracle_equivalence(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for inst in range(200):
        k = int(rng.choice([2, 3]))
        m = int(rng.integers(1, 9))
        pr = int(rng.choice([d for d in range(1, m + 1) if m % d == 0]))
        lay = build_layout(k * pr, k * (m // pr), k)
        valid = rng.random((lay.height, lay.width)) > 0.2 if inst % 3 == 0 else None
        d = int(rng.integers(1, 17))
        q, kk, v = rng.standard_normal((3, lay.length, d)) * rng.uniform(0.1, 5)
        sparse = sparse_attention(q, kk, v, build_descriptor(lay, valid))
        dense = dense_oracle_attention(q, kk, v, dense_mask(lay, valid))
        worst = max(worst, float(np.abs(sparse - dense).max()))
    elapsed = time.perf_counter() - t0
    report(2, "sparse attention equals dense masked attention", worst < 1e-10 and elapsed < 30,
           instances=200, max_abs_dev=f"{worst:.2e}", seconds=f"{elapsed:.2f}")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_mask_rule_fidelity(report):
    rng = np.random.default_rng(3)
    discrepancies, layouts, entries = 0, 0, 0
    asym_ok = sink_ok = True
    for m, k in layouts_up_to(500):
        lay = build_layout(k, k * m, k)
        n = lay.length
        valid = rng.random((k, k * m)) > 0.25 if layouts % 4 == 3 else None
        valid_tokens = lay.roles(valid) != 3 if valid is not None else None
        oracle = rule_oracle(m, k, valid_tokens)
        scan = np.fromiter((mask_entry(lay, i, j, valid) for i in range(n) for j in range(n)),
                           dtype=bool, count=n * n).reshape(n, n)
        discrepancies += int((scan != oracle).sum())
        sink_ok &= bool(scan[:, 0].all())
        s = lay.summary_indices()
        p = lay.patch_indices()
        if valid is None:
            asym_ok &= bool(scan[s[:, None], p].all() and not scan[p.ravel()][:, s].any())
        layouts += 1
        entries += n * n
    ok = discrepancies == 0 and asym_ok and sink_ok
    report(3, "exhaustive mask rule scan", ok, layouts=layouts, entries=entries, discrepancies=discrepancies,
           patch_summary_asymmetry=asym_ok, sink_every_row=sink_ok)


# 4 ---------------------------------------------------------------------------

def _encoder_case(seed):
    rng = np.random.default_rng(seed)
    lay = build_layout(2, 4, 2)
    valid = np.ones((2, 4), dtype=bool)
    valid[1, 3] = seed % 2 == 0
    desc = build_descriptor(lay, valid)
    cfg = EncoderConfig(dim=4, layers=2, heads=2, k=2, seed=seed)
    params = init_encoder_params(cfg)
    names = list(params)
    x = rng.standard_normal((lay.length, 4))
    w = rng.standard_normal((lay.length, 4))
    return grad_check(lambda t, *v: t.sum(t.mul(encoder_graph(t, t.const(x), dict(zip(names, v)), cfg, desc), w)),
                      list(params.values()))


def _attention_case(seed):
    rng = np.random.default_rng(seed)
    desc = build_descriptor(build_layout(2, 6, 2))
    q, k, v = rng.standard_normal((3, 2, desc.layout.length, 3))
    w = rng.standard_normal((2, desc.layout.length, 3))
    return grad_check(lambda t, q, k, v: t.sum(t.mul(topo_attention(t, q, k, v, desc), w)), [q, k, v])


def _mae_case(seed):
    rng = np.random.default_rng(seed)
    seq = sequence_from_grid(FeatureGrid(rng.standard_normal((2, 4, 4))), 2)
    desc = build_descriptor(seq.layout)
    cfg = EncoderConfig(dim=4, layers=1, heads=2, k=2, seed=seed)
    params = init_mae_params(cfg)
    names = list(params)
    phase = Phase.PATCH_WISE if seed % 2 else Phase.PACK_WISE
    mask = sample_mae_mask(seq.layout, phase, 0.5, seed=seed)
    return grad_check(lambda t, *v: mae_loss_graph(t, seq, mask, dict(zip(names, v)), cfg, desc),
                      list(params.values()))


def _moco_case(seed):
    rng = np.random.default_rng(seed)
    seq = sequence_from_grid(FeatureGrid(rng.standard_normal((2, 4, 4))), 2)
    desc = build_descriptor(seq.layout)
    cfg = EncoderConfig(dim=4, layers=1, heads=2, k=2, seed=seed)
    state = init_moco_state(cfg, seed=seed)
    names = list(state.query)
    keys = rng.standard_normal((2, 4))
    queue = rng.standard_normal((6, 4))
    queue /= np.linalg.norm(queue, axis=1, keepdims=True)

    def f(t, *v):
        return infonce_graph(t, moco_embed_graph(t, seq.embeddings, dict(zip(names, v)), cfg, desc, seq.roles),
                             keys, queue, 0.2)

    return grad_check(f, list(state.query.values()))


def _resampler_case(seed):
    rng = np.random.default_rng(seed)
    cfg = ResamplerConfig(in_dim=3, out_dim=2, queries=3, layers=2, positional=bool(seed % 2), seed=seed)
    params = init_resampler_params(cfg)
    names = list(params)
    corpus = [(rng.standard_normal((int(rng.integers(1, 5)), 3)), rng.standard_normal(2)) for _ in range(2)]
    return grad_check(lambda t, *v: alignment_loss_graph(t, corpus, dict(zip(names, v)), cfg),
                      list(params.values()))


def test_criterion_4_gradient_correctness(report):
    t0 = time.perf_counter()
    cases = {"attention": _attention_case, "encoder": _encoder_case, "mae": _mae_case,
             "moco": _moco_case, "resampler": _resampler_case}
    worst = {name: max(fn(seed) for seed in range(10)) for name, fn in cases.items()}
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-6 and elapsed < 120
    report(4, "grad_check on every trainable module, 10 seeds", ok,
           **{k: f"{v:.1e}" for k, v in worst.items()}, seconds=f"{elapsed:.1f}")


# 5 ---------------------------------------------------------------------------

def test_criterion_5_curriculum_mask_laws(report):
    rng = np.random.default_rng(5)
    violations = {p.value: 0 for p in Phase}
    for phase in Phase:
        for draw in range(1000):
            k = int(rng.integers(1, 4))
            lay = build_layout(k * int(rng.integers(1, 4)), k * int(rng.integers(1, 4)), k)
            valid = rng.random((lay.height, lay.width)) > 0.2 if draw % 2 else None
            mask = sample_mae_mask(lay, phase, float(rng.random()), valid, seed=draw)
            roles = lay.roles(valid)
            hidden = np.zeros(lay.length, dtype=bool)
            hidden[mask.indices] = True
            bad = bool(np.any(roles[mask.indices] != 1))
            live = roles[lay.patch_indices()] == 1
            gone = hidden[lay.patch_indices()]
            if phase is Phase.PATCH_WISE:
                bad |= bool(np.any(live.any(axis=1) & ~(live & ~gone).any(axis=1)))
            else:
                bad |= bool(np.any(gone.any(axis=1) & (gone != live).any(axis=1)))
            violations[phase.value] += int(bad)
    report(5, "curriculum mask invariants, 1000 draws per phase", sum(violations.values()) == 0,
           **{f"violations_{k}": v for k, v in violations.items()})


# 6 ---------------------------------------------------------------------------

def test_criterion_6_infonce(report):
    e = np.eye(3)
    analytic = abs(infonce_loss(e[0], e[0], e[1:], 1.0) - np.log(1 + 2 * np.exp(-1)))
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(2, 9))
        q, pos = rng.standard_normal((2, d))
        queue = rng.standard_normal((int(rng.integers(0, 20)), d))
        tau = float(rng.uniform(0.05, 2.0))
        logits = [float(q @ pos) / tau] + [float(q @ n) / tau for n in queue]
        top = max(logits)
        brute = -(logits[0] - top - np.log(sum(np.exp(l - top) for l in logits)))
        worst = max(worst, abs(infonce_loss(q, pos, queue, tau) - brute))
    report(6, "InfoNCE analytic value and brute-force cross-entropy", analytic < 1e-9 and worst < 1e-12,
           analytic_error=f"{analytic:.1e}", max_bruteforce_error=f"{worst:.1e}")


# 7 ---------------------------------------------------------------------------

def test_criterion_7_connector_contract(report):
    rng = np.random.default_rng(7)
    cfg = ResamplerConfig(in_dim=16, out_dim=16)
    params = init_resampler_params(cfg)
    lengths = {}
    worst = 0.0
    for length in (1, 7, 130, 4096):
        x = rng.standard_normal((length, 16))
        out = resample(x, cfg, params)
        lengths[length] = out.shape[0]
        if length > 1:
            worst = max(worst, float(np.abs(out - resample(x[rng.permutation(length)], cfg, params)).max()))
    ok = set(lengths.values()) == {32} and worst <= 1e-12
    report(7, "resampler emits 32 tokens and ignores input order", ok,
           tokens=lengths, max_perm_dev=f"{worst:.1e}")


# 8 ---------------------------------------------------------------------------

def test_criterion_8_training_sanity(report, tmp_path):
    t0 = time.perf_counter()
    rows, ok = [], True
    for seed in (1, 2, 3):
        corpus = synthetic_corpus(20, 6, 6, 16, seed=seed)
        cfg = TrainConfig(seed=seed, steps=500, dim=16)
        tensors = None
        for stage in STAGES:
            tensors, meta, log = run_stage(stage, corpus, cfg, tensors)
            # chain through the on-disk checkpoint as the CLI does
            path = tmp_path / f"{seed}_{stage}.tpck"
            save_checkpoint(path, tensors, meta)
            tensors = load_checkpoint(path)[0]
            losses = np.array([e["loss"] for e in log])
            w = len(losses) // 10
            good = bool(np.all(np.isfinite(losses))) and loss_improved(losses)
            ok &= good
            rows.append(f"s{seed}/{stage}:{losses[:w].mean():.3g}->{losses[-w:].mean():.3g}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 600
    report(8, "every stage lowers its loss over 500 steps (first vs last 10% mean)", ok,
           runs=" ".join(rows), seconds=f"{elapsed:.0f}")


# 9 ---------------------------------------------------------------------------

def _components(nodes, kept):
    parent = {n: n for n in nodes}

    def find(a):
        while parent[a] != a:
            a = parent[a]
        return a

    for u, v, _ in kept:
        parent[find(u)] = find(v)
    groups = {}
    for n in nodes:
        groups.setdefault(find(n), set()).add(n)
    return {frozenset(g) for g in groups.values()}


def test_criterion_9_roi(report):
    mismatches, grids = 0, 0
    for h in range(1, 13):
        for w in range(1, 13):
            if not 3 <= h * w <= 12:
                continue
            for seed in range(10):
                g = build_similarity_graph(FeatureGrid(np.random.default_rng([9, h, w, seed]).standard_normal((h, w, 5))))
                tree = spanning_tree(g)
                best = min(itertools.combinations(range(len(tree)), 2), key=lambda c: tree[c[0]][2] + tree[c[1]][2])
                want = _components(g.nodes.tolist(), [e for i, e in enumerate(tree) if i not in best])
                mismatches += int({frozenset(r) for r in mst_cluster(g).regions} != want)
                grids += 1
    aris = []
    for seed in range(10):
        grid, truth = synthetic_grid(12, 12, 16, blobs=3, noise=0.05, seed=seed, return_labels=True)
        labels = mst_cluster(build_similarity_graph(grid)).labels((12, 12))
        aris.append(adjusted_rand_score(truth.ravel(), labels.ravel()))
    ok = mismatches == 0 and min(aris) >= 0.9
    report(9, "tree cut matches brute force and planted blobs are recovered", ok,
           grids=grids, mismatches=mismatches, min_ari=f"{min(aris):.3f}")


# 10 --------------------------------------------------------------------------

def test_criterion_10_format_round_trip(report, tmp_path):
    rng = np.random.default_rng(10)
    failures = {"fgrid": 0, "checkpoint": 0}
    for n in range(50):
        h, w, d = (int(x) for x in rng.integers(1, 9, size=3))
        valid = rng.random((h, w)) > 0.3 if n % 2 else None
        write_fgrid(tmp_path / "a.fgrid", FeatureGrid(rng.standard_normal((h, w, d)), valid))
        write_fgrid(tmp_path / "b.fgrid", read_fgrid(tmp_path / "a.fgrid"))
        failures["fgrid"] += int((tmp_path / "a.fgrid").read_bytes() != (tmp_path / "b.fgrid").read_bytes())
        tensors = {f"p{i}": rng.standard_normal(tuple(int(s) for s in rng.integers(0, 5, size=int(rng.integers(0, 4)))))
                   for i in range(int(rng.integers(0, 6)))}
        save_checkpoint(tmp_path / "a.tpck", tensors, {"n": n})
        save_checkpoint(tmp_path / "b.tpck", *load_checkpoint(tmp_path / "a.tpck"))
        failures["checkpoint"] += int((tmp_path / "a.tpck").read_bytes() != (tmp_path / "b.tpck").read_bytes())
    report(10, "FGRID and checkpoint write-read-write byte identity", sum(failures.values()) == 0,
           payloads=50, **{f"{k}_failures": v for k, v in failures.items()})
