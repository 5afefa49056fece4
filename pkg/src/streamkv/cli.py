"""Command line front-end.

Four subcommands: ``generate`` rolls out blocks and writes run artifacts,
``memory-report`` projects cache footprints at production scale,
``bench-strategies`` ranks retention policies on the planted workload, and
``analyze`` summarizes a run's selection trace.  Config problems exit with
status 2 and a ``section.key`` message; runtime failures exit with 1.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from streamkv import analysis, config as config_mod
from streamkv.cache import memory_report
from streamkv.errors import ContractViolation, GenerationError
from streamkv.generator import generate

__all__ = ["main", "run"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamkv",
        description="Bounded-memory KV cache rollout for block-causal video models.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="roll out latent blocks and write artifacts")
    gen.add_argument("--config", help="INI config file (defaults to the toy preset)")
    gen.add_argument("--blocks", type=int, help="override run.blocks")
    gen.add_argument("--seed", type=int, help="override run.seed")
    gen.add_argument("--out", help="override run.out")
    gen.add_argument("--policy", choices=("bounded", "unbounded"), default="bounded")
    gen.add_argument("--steps", type=int, help="override schedule.steps")
    gen.add_argument("--dump-frames", action="store_true",
                     help="decode and write frames.bin")
    gen.add_argument("--no-latents", action="store_true",
                     help="skip writing latents.bin")

    mem = sub.add_parser("memory-report",
                         help="project full vs bounded cache size at production scale")
    mem.add_argument("--durations", default="60,600,3600",
                     help="comma-separated stream lengths in seconds")
    mem.add_argument("--fps", type=float, default=30.0)
    mem.add_argument("--temporal-stride", type=int, default=4,
                     help="pixel frames per latent frame")
    mem.add_argument("--bytes-per-scalar", type=int, default=2)

    bench = sub.add_parser("bench-strategies",
                           help="retained softmax mass per retention policy")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--num-blocks", type=int, default=24)
    bench.add_argument("--keys-per-block", type=int, default=8)
    bench.add_argument("--dim", type=int, default=24)
    bench.add_argument("--steps", type=int, default=16)
    bench.add_argument("--budget", type=int, default=4)
    bench.add_argument("--strength", type=float, default=3.0)
    bench.add_argument("--strategies", default=",".join(analysis.STRATEGIES))

    ana = sub.add_parser("analyze", help="summarize a run's selection trace")
    src = ana.add_mutually_exclusive_group(required=True)
    src.add_argument("--run", help="run directory containing selection_trace.csv")
    src.add_argument("--trace", help="path to a selection trace CSV")
    ana.add_argument("--buckets", type=int, default=10)
    ana.add_argument("--window", type=int, default=10)
    ana.add_argument("--out", help="directory for profile/churn/diversity CSVs")
    return parser


def _cmd_generate(args) -> int:
    cfg = config_mod.load_config(args.config) if args.config \
        else config_mod.default_config()
    cfg = config_mod.with_overrides(cfg, blocks=args.blocks, seed=args.seed,
                                    out=args.out)
    if args.steps is not None:
        cfg = replace(cfg, schedule=replace(cfg.schedule, steps=args.steps))
    result = generate(cfg, policy=args.policy, collect_frames=args.dump_frames)
    out = result.write(cfg.run.out, dump_latents=not args.no_latents,
                       dump_frames=args.dump_frames)
    last = result.cache_rows[-1] if result.cache_rows else None
    print(f"policy={result.policy} blocks={len(result.cache_rows)} "
          f"seed={result.seed} backend={result.backend}")
    if last is not None:
        print(f"context_tokens={last.context_tokens} "
              f"full_history_tokens={last.full_history_tokens} "
              f"evicted_frames={last.evicted_frames}")
    print(f"config_sha256={result.config_sha256}")
    print(f"wrote {os.path.join(out, 'manifest.json')}")
    return 0


def _cmd_memory_report(args) -> int:
    try:
        durations = [float(v) for v in args.durations.split(",") if v.strip()]
    except ValueError as exc:
        raise ValueError(f"--durations: {exc}") from exc
    if not durations:
        raise ValueError("--durations: need at least one value")
    cache_cfg = config_mod.reference_cache_config()
    header = (f"{'duration_s':>10} {'full_tokens':>13} {'bounded_tokens':>14} "
              f"{'full_GB':>10} {'bounded_GB':>10} {'reduction':>9}")
    print(header)
    for duration in durations:
        rep = memory_report(cache_cfg, duration, args.fps, args.temporal_stride,
                            bytes_per_scalar=args.bytes_per_scalar)
        print(f"{duration:>10.0f} {rep.total_tokens:>13d} {rep.bounded_tokens:>14d} "
              f"{rep.full_bytes / 1e9:>10.2f} {rep.bounded_bytes / 1e9:>10.2f} "
              f"{rep.reduction:>8.1f}x")
    return 0


def _cmd_bench_strategies(args) -> int:
    strategies = tuple(s.strip() for s in args.strategies.split(",") if s.strip())
    workload = analysis.make_planted_workload(
        seed=args.seed, num_blocks=args.num_blocks,
        keys_per_block=args.keys_per_block, dim=args.dim, num_steps=args.steps,
        planted_strength=args.strength)
    results = analysis.strategy_bench(workload, strategies, budget=args.budget)
    print(f"planted_block={workload.planted_block} budget={args.budget} "
          f"steps={args.steps}")
    print(f"{'strategy':>10} {'mean_mass':>10} {'min':>8} {'max':>8}")
    for name in sorted(results, key=lambda n: -results[n].mean_retained_mass):
        res = results[name]
        print(f"{name:>10} {res.mean_retained_mass:>10.4f} "
              f"{res.per_step.min():>8.4f} {res.per_step.max():>8.4f}")
    return 0


def _cmd_analyze(args) -> int:
    path = args.trace or os.path.join(args.run, "selection_trace.csv")
    if not os.path.exists(path):
        raise ValueError(f"selection trace not found: {path}")
    selections, counts, score_vectors = analysis.load_selection_history(path)
    if not selections:
        raise ValueError(f"no selection events in {path}")
    churn = analysis.selection_churn(selections)
    diversity = analysis.position_diversity(selections, counts, window=args.window)
    profile, bucket_counts = analysis.importance_profile(score_vectors, args.buckets)
    print(f"blocks={len(selections)} scored_events={len(score_vectors)}")
    if churn.size:
        print(f"mean_churn={churn.mean():.4f} max_churn={churn.max():.4f}")
    print(f"mean_diversity={diversity.mean():.4f}")
    print(f"{'bucket':>6} {'mean_score':>12} {'count':>7}")
    for b in range(args.buckets):
        mean = "nan" if np.isnan(profile[b]) else f"{profile[b]:.4f}"
        print(f"{b:>6} {mean:>12} {bucket_counts[b]:>7d}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "importance_profile.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bucket", "mean_score", "count"])
            for b in range(args.buckets):
                writer.writerow([b, repr(float(profile[b])), int(bucket_counts[b])])
        with open(os.path.join(args.out, "churn.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["transition", "jaccard_distance"])
            for i, value in enumerate(churn):
                writer.writerow([i, repr(float(value))])
        with open(os.path.join(args.out, "diversity.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block", "diversity"])
            for i, value in enumerate(diversity):
                writer.writerow([i, repr(float(value))])
        print(f"wrote analysis CSVs to {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "memory-report": _cmd_memory_report,
    "bench-strategies": _cmd_bench_strategies,
    "analyze": _cmd_analyze,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run():
    sys.exit(main(sys.argv[1:]))
