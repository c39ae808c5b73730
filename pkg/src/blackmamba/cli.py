"""Command line entry point: ``blackmamba <subcommand> [options]``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure, 3 selfcheck failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, parse_config
from .model import PRESETS, preset

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_SELFCHECK = 0, 1, 2, 3
OUT_ENV = "BLACKMAMBA_OUT"

log = logging.getLogger("blackmamba")


class UsageError(ValueError):
    pass


def _run_config(args) -> RunConfig:
    run = parse_config(args.config) if args.config else RunConfig()
    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        run.model = preset(args.preset)
        run.preset = args.preset
    if args.seed is not None:
        run.seed = args.seed
        if run.train is not None:
            run.train.seed = args.seed
    return run


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "blackmamba-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(text: str, path: Path) -> None:
    path.write_text(text)
    print(text, end="" if text.endswith("\n") else "\n")


def _load_or_init(args, run: RunConfig):
    from .checkpoint import load_checkpoint
    from .model import init_params
    if getattr(args, "checkpoint", None):
        params, _ = load_checkpoint(args.checkpoint)
        return params
    return init_params(run.model, run.seed)


# --------------------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .train import TrainConfig, evaluate, train_loop
    run = _run_config(args)
    tcfg = run.train or TrainConfig(seed=run.seed)
    overrides = {k: v for k, v in (("steps", args.steps), ("task", args.task)) if v is not None}
    if overrides:
        tcfg = TrainConfig(**{**asdict(tcfg), **overrides})
    out = _out_dir(args)
    ckpt_dir = out / run.paths.checkpoint_dir
    metrics_dir = out / run.paths.metrics_dir
    result = train_loop(run.model, tcfg, out_dir=metrics_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for p in result.checkpoints:
        Path(p).replace(ckpt_dir / Path(p).name)
    final = save_checkpoint(ckpt_dir / "final.bmc", result.params, {"step": tcfg.steps, "task": tcfg.task})
    summary = {"task": tcfg.task, "steps": tcfg.steps, "initial_loss": result.initial_loss,
               "final_loss": result.final_loss, "eval": evaluate(result.params, tcfg),
               "checkpoint": str(final), "metrics": str(metrics_dir / "metrics.jsonl")}
    if run.model.uses_moe:
        result.routing.to_csv(metrics_dir / "route_stats.csv")
    _emit(json.dumps(summary, indent=2), out / "train_summary.json")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .model import generate
    run = _run_config(args)
    params = _load_or_init(args, run)
    try:
        prompt = [int(t) for t in args.prompt.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--prompt must be comma-separated token ids, got {args.prompt!r}") from None
    tokens = generate(params, prompt, args.n_tokens, mode=args.mode, temperature=args.temperature, seed=run.seed)
    out = _out_dir(args)
    _emit(json.dumps({"prompt": prompt, "tokens": tokens}), out / "generation.json")
    return EXIT_OK


def cmd_bench_latency(args) -> int:
    from .bench import latency_sweep, samples_to_csv, summarize
    run = _run_config(args)
    lengths = [int(n) for n in args.lengths.split(",")] if args.lengths else run.bench.lengths
    variants = args.variants.split(",") if args.variants else run.bench.variants
    samples = []
    for v in variants:
        cfg = run.model.with_(variant=v)
        samples += latency_sweep(cfg, lengths, repeats=run.bench.repeats, warmup=run.bench.warmup, seed=run.seed)
    out = _out_dir(args)
    if args.format == "json":
        _emit(json.dumps({"samples": [asdict(s) for s in samples], "summary": summarize(samples)}, indent=2),
              out / "latency.json")
    else:
        _emit(samples_to_csv(samples), out / "latency.csv")
        (out / "latency_summary.json").write_text(json.dumps(summarize(samples), indent=2))
    return EXIT_OK


def cmd_count(args) -> int:
    from .accounting import build_report
    run = _run_config(args)
    name = run.preset or (Path(args.config).stem if args.config else "default")
    report = build_report(run.model, name=name)
    out = _out_dir(args)
    (out / "count.json").write_text(report.to_json())
    if args.format == "json":
        print(report.to_json())
    else:
        print(report.table())
    return EXIT_OK


def cmd_route_stats(args) -> int:
    from .bench import random_batches, routing_histogram, routing_summary
    from .moe import SinkhornConfig
    run = _run_config(args)
    params = _load_or_init(args, run)
    b = run.bench
    batches = random_batches(params.config, b.route_batches, b.route_batch_size, b.route_seq_len, run.seed)
    stats = routing_histogram(params, batches, routing=args.routing, sinkhorn_cfg=SinkhornConfig())
    out = _out_dir(args)
    if args.format == "json":
        _emit(routing_summary(stats), out / "route_stats.json")
    else:
        _emit(stats.to_csv(), out / "route_stats.csv")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .checks import format_table, run_selfcheck
    t0 = time.perf_counter()
    results = run_selfcheck(fault=args.inject_fault)
    elapsed = time.perf_counter() - t0
    table = format_table(results)
    print(table)
    print(f"total {elapsed:.1f}s; {sum(r.passed for r in results)}/{len(results)} checks passed")
    if args.out or os.environ.get(OUT_ENV):
        out = _out_dir(args)
        (out / "selfcheck.json").write_text(json.dumps(
            [{"name": r.name, "passed": r.passed, "detail": r.detail, "seconds": r.seconds} for r in results],
            indent=2))
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFCHECK


def cmd_sinkhorn_diag(args) -> int:
    import csv
    import io
    from .sinkhorn import sinkhorn
    run = _run_config(args)
    rng = np.random.default_rng(run.seed)
    rows = []
    for _ in range(args.trials):
        L = rng.normal(size=(args.samples, args.experts))
        for init in args.inits.split(","):
            plan = sinkhorn(L, temperature=args.temperature, init=init, tol=args.tol)
            rows.append({"iters_used": plan.iters_used, "residual": plan.residual, "init": init,
                         "S": args.samples, "N": args.experts, "temperature": args.temperature})
    out = _out_dir(args)
    if args.format == "json":
        _emit(json.dumps(rows, indent=2), out / "sinkhorn_diag.json")
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        _emit(buf.getvalue(), out / "sinkhorn_diag.csv")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run config (see blackmamba.config)")
    common.add_argument("--preset", metavar="NAME", help=f"model preset: {', '.join(PRESETS)}")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", help=f"output directory (default ${OUT_ENV} or ./blackmamba-out)")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="tabular output format")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="blackmamba", description="Mamba + routed-MoE language model toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train on a synthetic task",
                       description="Writes metrics.jsonl (step, loss, lr, per-layer expert counts) and checkpoints.")
    p.add_argument("--steps", type=int)
    p.add_argument("--task", choices=("copy", "associative-recall"))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="autoregressive generation from a prompt")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--prompt", default="1", help="comma-separated token ids")
    p.add_argument("--n-tokens", type=int, default=16)
    p.add_argument("--mode", choices=("greedy", "temperature"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("bench-latency", parents=[common], help="per-token generation time and state bytes",
                       description="CSV columns: variant, position (tokens already consumed), ns_per_token "
                                   "(median over repeats), state_bytes (Mamba state or KV cache), repeats.")
    p.add_argument("--lengths", help="comma-separated positions, e.g. 128,512,2048")
    p.add_argument("--variants", help="comma-separated variants, e.g. mamba-moe,transformer")
    p.set_defaults(fn=cmd_bench_latency)

    p = sub.add_parser("count", parents=[common], help="parameter and FLOP report")
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("route-stats", parents=[common], help="token counts per layer and expert",
                       description="CSV columns: layer (MoE layer index), expert, token_count, step.")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--routing", choices=("sinkhorn", "argmax"), default="sinkhorn")
    p.set_defaults(fn=cmd_route_stats)

    p = sub.add_parser("selfcheck", parents=[common], help="run the invariant suite")
    p.add_argument("--inject-fault", choices=("flip_dA_sign",), help="testing aid: corrupt the streaming step")
    p.set_defaults(fn=cmd_selfcheck)

    p = sub.add_parser("sinkhorn-diag", parents=[common], help="Sinkhorn iteration counts per call",
                       description="CSV columns: iters_used, residual, init, S, N, temperature.")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--samples", type=int, default=256, help="S, tokens per call")
    p.add_argument("--experts", type=int, default=8, help="N, experts")
    p.add_argument("--temperature", type=float, default=2.0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--inits", default="fast,uniform", help="comma-separated init modes (fast, uniform, literal)")
    p.set_defaults(fn=cmd_sinkhorn_diag)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
