"""Command-line harness: ``topopack <subcommand>``.

Exit status: 0 success, 1 property failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks
from .attention import dense_oracle_attention, sparse_attention
from .checkpoint import load_checkpoint, save_checkpoint
from .connector import ResamplerConfig, init_resampler_params, resample
from .grid import Role, build_layout, read_fgrid, write_fgrid
from .encoder import encoder_forward, sequence_from_grid
from .roi import propose_regions
from .synth import synthetic_grid
from .topomask import build_descriptor, flop_estimate, mask_stats
from .train import STAGES, TrainConfig, loss_improved, run_stage


def _emit(args, payload: dict) -> None:
    if not args.no_timestamp:
        payload = {**payload, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    text = json.dumps(payload, sort_keys=True)
    if args.json:
        Path(args.json).write_text(text + "\n")
    else:
        print(text)


def _layout_from_args(args):
    if args.M is not None:
        return build_layout(args.k, args.k * args.M, args.k), None
    if args.H is None or args.W is None:
        raise ValueError("give --M or both --H and --W")
    ph, pw = -(-args.H // args.k) * args.k, -(-args.W // args.k) * args.k
    valid = np.zeros((ph, pw), dtype=bool)
    valid[:args.H, :args.W] = True
    return build_layout(ph, pw, args.k), (valid if (ph, pw) != (args.H, args.W) else None)


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.count == 1:
        write_fgrid(out, synthetic_grid(args.H, args.W, args.D, args.blobs, args.noise, args.seed))
        files = [str(out)]
    else:
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for i in range(args.count):
            path = out / f"grid_{i:04d}.fgrid"
            write_fgrid(path, synthetic_grid(args.H, args.W, args.D, args.blobs, args.noise, args.seed + i))
            files.append(str(path))
    _emit(args, {"files": files, "H": args.H, "W": args.W, "D": args.D, "seed": args.seed})
    return 0


def cmd_layout(args) -> int:
    layout, valid = _layout_from_args(args)
    roles = layout.roles(valid)
    _emit(args, {"H": layout.height, "W": layout.width, "k": layout.k, "M": layout.num_packs,
                 "N": layout.length, "pack_rows": layout.pack_rows, "pack_cols": layout.pack_cols,
                 "tokens_per_pack": layout.tokens_per_pack,
                 "roles": {r.name.lower(): int((roles == r).sum()) for r in Role}})
    return 0


def cmd_mask(args) -> int:
    layout, _ = _layout_from_args(args)
    stats = mask_stats(layout.num_packs, layout.k)
    stats["flops"] = flop_estimate(layout, args.D)
    _emit(args, stats)
    return 0


def cmd_check(args) -> int:
    results = checks.run_all()
    ok = all(r["pass"] for r in results)
    _emit(args, {"all_pass": ok, "properties": results})
    return 0 if ok else 1


def cmd_bench(args) -> int:
    layout, valid = _layout_from_args(args)
    desc = build_descriptor(layout, valid)
    rng = np.random.default_rng(args.seed)
    q, k, v = rng.standard_normal((3, layout.length, args.D))
    sc, dc = {}, {}
    t0 = time.perf_counter()
    sparse = sparse_attention(q, k, v, desc, counter=sc)
    t1 = time.perf_counter()
    dense = dense_oracle_attention(q, k, v, desc, counter=dc)
    t2 = time.perf_counter()
    stats = mask_stats(layout.num_packs, layout.k)
    payload = {"M": layout.num_packs, "k": layout.k, "N": layout.length, "d": args.D,
               "sparse_scores": sc["scores"], "dense_scores": dc["scores"], "allowed": stats["allowed"],
               "ratio": stats["ratio"], "measured_ratio": sc["scores"] / dc["scores"],
               "max_abs_dev": float(np.abs(sparse - dense).max())}
    if not args.no_timestamp:
        payload.update(sparse_seconds=t1 - t0, dense_seconds=t2 - t1)
    _emit(args, payload)
    return 0


def _load_corpus(path) -> list:
    path = Path(path)
    files = sorted(path.glob("*.fgrid")) if path.is_dir() else [path]
    if not files:
        raise ValueError(f"no FGRID files in {path}")
    return [read_fgrid(f) for f in files]


def _train_config(args) -> TrainConfig:
    return TrainConfig(seed=args.seed, steps=args.steps, lr=args.lr, k=args.k, dim=args.D, ratio=args.ratio,
                       tau=args.tau, momentum=args.momentum, sigma=args.sigma, queue=args.queue,
                       queries=args.queries)


def cmd_train(args) -> int:
    corpus = _load_corpus(args.corpus)
    cfg = _train_config(args)
    init = None
    if args.resume:
        init, meta = load_checkpoint(args.resume)
        saved = meta.get("config", {})
        cfg = replace(cfg, dim=saved.get("dim", cfg.dim), layers=saved.get("layers", cfg.layers),
                      heads=saved.get("heads", cfg.heads), k=saved.get("k", cfg.k))
    if corpus[0].dim != cfg.dim:
        raise ValueError(f"corpus dim {corpus[0].dim} != --D {cfg.dim}")
    sink = open(args.json, "w") if args.json else None
    try:
        def log_fn(entry):
            if sink:
                sink.write(json.dumps(entry, sort_keys=True) + "\n")
        tensors, meta, log = run_stage(args.stage, corpus, cfg, init, log_fn)
    except FloatingPointError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    finally:
        if sink:
            sink.close()
    if args.out:
        save_checkpoint(args.out, tensors, meta)
    losses = [e["loss"] for e in log]
    summary = {"stage": args.stage, "steps": len(losses), "initial_loss": losses[0],
               "final_loss": losses[-1], "improved": loss_improved(losses), "checkpoint": args.out}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_roi(args) -> int:
    grid = read_fgrid(args.grid) if args.grid else synthetic_grid(args.H or 12, args.W or 12, args.D, 3,
                                                                   args.noise, args.seed)
    _emit(args, propose_regions(grid))
    return 0


def cmd_resample(args) -> int:
    grid = read_fgrid(args.grid) if args.grid else synthetic_grid(args.H or 6, args.W or 6, args.D, 3,
                                                                   args.noise, args.seed)
    seq = sequence_from_grid(grid, args.k)
    tokens = seq.embeddings[np.r_[0, seq.layout.summary_indices()]]
    saved = load_checkpoint(args.checkpoint)[0] if args.checkpoint else {}
    queries = saved["conn.queries"].shape[0] if "conn.queries" in saved else args.queries
    rcfg = ResamplerConfig(in_dim=grid.dim, out_dim=grid.dim, queries=queries, seed=args.seed)
    params = init_resampler_params(rcfg)
    params.update({k: v for k, v in saved.items() if k in params})
    enc = {k[len("enc."):]: v for k, v in saved.items() if k.startswith("enc.")}
    if enc:
        meta = load_checkpoint(args.checkpoint)[1].get("config", {})
        ecfg = TrainConfig(**meta).encoder_config() if meta else TrainConfig(dim=grid.dim, k=args.k).encoder_config()
        out = encoder_forward(seq, ecfg, enc)
        tokens = np.vstack([out.global_token, out.summaries])
    out = resample(tokens, rcfg, params)
    _emit(args, {"inputs": int(len(tokens)), "queries": int(out.shape[0]), "out_dim": int(out.shape[1]),
                 "output": np.round(out, 12).tolist()})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--H", type=int)
    common.add_argument("--W", type=int)
    common.add_argument("--M", type=int, help="pack count; packs laid out as a 1 x M strip")
    common.add_argument("--k", type=int, default=3)
    common.add_argument("--D", type=int, default=16)
    common.add_argument("--json", metavar="PATH")
    common.add_argument("--no-timestamp", action="store_true")

    p = argparse.ArgumentParser(prog="topopack", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write seeded synthetic FGRID grids")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--blobs", type=int, default=3)
    s.add_argument("--noise", type=float, default=0.05)
    s.set_defaults(func=cmd_synth)

    sub.add_parser("layout", parents=[common], help="pack layout summary").set_defaults(func=cmd_layout)
    sub.add_parser("mask", parents=[common], help="mask sparsity statistics").set_defaults(func=cmd_mask)
    sub.add_parser("check", parents=[common], help="run the invariant suite").set_defaults(func=cmd_check)
    sub.add_parser("bench", parents=[common], help="sparse vs dense attention").set_defaults(func=cmd_bench)

    t = sub.add_parser("train", parents=[common], help="run one pretraining stage")
    t.add_argument("--stage", choices=STAGES, required=True)
    t.add_argument("--corpus", required=True, help="FGRID file or directory")
    t.add_argument("--resume", help="checkpoint from the previous stage")
    t.add_argument("--out", help="checkpoint to write")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=0.02)
    t.add_argument("--ratio", type=float)
    t.add_argument("--tau", type=float, default=0.07)
    t.add_argument("--momentum", type=float, default=0.99)
    t.add_argument("--sigma", type=float, default=0.1)
    t.add_argument("--queue", type=int, default=1024)
    t.add_argument("--queries", type=int, default=32)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("roi", parents=[common], help="region proposals for a grid")
    r.add_argument("--grid")
    r.add_argument("--noise", type=float, default=0.05)
    r.set_defaults(func=cmd_roi)

    q = sub.add_parser("resample", parents=[common], help="run the query resampler")
    q.add_argument("--grid")
    q.add_argument("--checkpoint")
    q.add_argument("--queries", type=int, default=32)
    q.add_argument("--noise", type=float, default=0.05)
    q.set_defaults(func=cmd_resample)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
