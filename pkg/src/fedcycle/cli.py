"""Command-line entry point: run experiments, emit metrics and summaries."""
from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
from dataclasses import replace
from pathlib import Path

from . import transport
from .config import ConfigError, HeuristicSection, build_experiment, load_plan
from .heuristics import run_heuristic, run_scaling_sweep
from .nn import gradcheck_suite
from .partition import stratified_split, write_manifest

METRICS_COLUMNS = ["global_epoch", "phase", "institution", "learning_rate",
                   "train_acc", "val_acc", "val_loss"]


def _env_seed() -> int | None:
    raw = os.environ.get("FEDCYCLE_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"FEDCYCLE_SEED must be an integer, got {raw!r}")


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for r in rows:
            writer.writerow([
                r.global_epoch,
                r.phase,
                "" if r.institution is None else r.institution,
                repr(r.learning_rate),
                repr(r.train_accuracy),
                repr(r.validation_accuracy),
                repr(r.validation_loss),
            ])


def _summary_dict(seed, result) -> dict:
    return {
        "seed": seed,
        "train_accuracy": result.train_accuracy,
        "validation_accuracy": result.validation_accuracy,
        "test_accuracy": result.test_accuracy,
        "test_top_k": result.test_top_k,
        "top_k": result.top_k,
        "epochs": result.metrics[-1].global_epoch if result.metrics else 0,
        "transfers": result.transfers,
        "optimizer_steps": result.optimizer_steps,
    }


def _aggregate(summaries) -> dict:
    def stats(key):
        vals = [s[key] for s in summaries]
        return {"mean": statistics.fmean(vals),
                "std": statistics.pstdev(vals) if len(vals) > 1 else 0.0}
    return {
        "seeds": [s["seed"] for s in summaries],
        "train_accuracy": stats("train_accuracy"),
        "validation_accuracy": stats("validation_accuracy"),
        "test_accuracy": stats("test_accuracy"),
    }


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _prepare(args):
    plan = load_plan(args.config)
    if args.output_dir:
        plan = replace(plan, output_dir=args.output_dir)
    seeds = plan.seeds
    override = _env_seed()
    if args.seed_override is not None:
        override = args.seed_override
    if override is not None:
        seeds = (override,)
    heuristic = plan.heuristic
    if args.freq is not None:
        heuristic = HeuristicSection(kind=heuristic.kind, frequency=args.freq,
                                     institution=heuristic.institution,
                                     m_values=heuristic.m_values)
    dataset, base_cfg = build_experiment(plan)
    if args.transport:
        base_cfg = replace(base_cfg, transport=args.transport)
    split = stratified_split(dataset, plan.split_plan)
    outdir = Path(plan.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    return plan, heuristic, dataset, base_cfg, split, seeds, outdir


def cmd_run(args) -> int:
    plan, heuristic, _, base_cfg, split, seeds, outdir = _prepare(args)
    if heuristic.kind == "sweep":
        print("error: use the `sweep` subcommand for sweep configs", file=sys.stderr)
        return 2
    write_manifest(split, outdir / "split_manifest.json")
    summaries = []
    for seed in seeds:
        cfg = replace(base_cfg, seed=seed)
        try:
            result = run_heuristic(cfg, split, heuristic.kind,
                                   institution=heuristic.institution,
                                   frequency=heuristic.frequency)
        except Exception as exc:
            print(f"error: heuristic {heuristic.kind!r} failed at seed {seed}: {exc}",
                  file=sys.stderr)
            return 1
        write_metrics_csv(outdir / f"metrics_seed{seed}.csv", result.metrics)
        summary = _summary_dict(seed, result)
        _write_json(outdir / f"summary_seed{seed}.json", summary)
        summaries.append(summary)
        print(f"seed {seed}: train {result.train_accuracy:.4f} "
              f"val {result.validation_accuracy:.4f} test {result.test_accuracy:.4f}")
    _write_json(outdir / "aggregate.json", _aggregate(summaries))
    agg = _aggregate(summaries)["test_accuracy"]
    print(f"test accuracy over {len(seeds)} seed(s): "
          f"{agg['mean']:.4f} +/- {agg['std']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    plan, heuristic, _, base_cfg, split, seeds, outdir = _prepare(args)
    m_values = heuristic.m_values or tuple(range(1, len(split.institutions) + 1))
    write_manifest(split, outdir / "split_manifest.json")
    per_seed = {}
    for seed in seeds:
        cfg = replace(base_cfg, seed=seed)
        rows = run_scaling_sweep(cfg, split, m_values, freq=heuristic.frequency)
        per_seed[seed] = {m: acc for m, acc in rows}
    table = []
    for m in m_values:
        vals = [per_seed[s][m] for s in seeds]
        table.append({"m": m, "test_accuracy_mean": statistics.fmean(vals),
                      "test_accuracy_std": statistics.pstdev(vals) if len(vals) > 1 else 0.0})
        print(f"m={m}: {table[-1]['test_accuracy_mean']:.4f} "
              f"+/- {table[-1]['test_accuracy_std']:.4f}")
    _write_json(outdir / "sweep.json",
                {"seeds": list(seeds), "frequency": heuristic.frequency, "curve": table})
    return 0


def cmd_gradcheck(args) -> int:
    """Finite-difference check over every layer kind and both heads."""
    worst = gradcheck_suite(n_seeds=args.seeds)
    ok = worst < args.tolerance
    print(f"gradcheck: max relative error {worst:.3e} over {args.seeds} seeds "
          f"({'PASS' if ok else 'FAIL'}, tolerance {args.tolerance:g})")
    return 0 if ok else 1


def cmd_partition(args) -> int:
    plan = load_plan(args.config)
    if args.output_dir:
        plan = replace(plan, output_dir=args.output_dir)
    dataset, _ = build_experiment(plan)
    split = stratified_split(dataset, plan.split_plan)
    outdir = Path(plan.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "split_manifest.json"
    write_manifest(split, path)
    print(f"wrote {path}")
    return 0


def cmd_inspect(args) -> int:
    data = transport.read_packet(args.packet)
    meta = transport.read_meta(data)
    print(f"format_version: {meta.format_version}")
    print(f"arch_hash: {meta.arch_hash:#018x}")
    print(f"global_epoch: {meta.global_epoch}")
    print(f"origin_institution: {meta.origin}")
    print(f"optimizer_state: {meta.opt_kind or 'none'}")
    print(f"payload_tensors: {meta.payload_tensors}")
    print(f"bytes: {len(data)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcycle",
        description="Simulate collaborative training heuristics over patient silos.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("config", help="experiment YAML/JSON file")
        p.add_argument("--seed-override", type=int, default=None)
        p.add_argument("--output-dir", default=None)
        p.add_argument("--transport", choices=["memory", "socket"], default=None)
        p.add_argument("--freq", type=int, default=None,
                       help="override weight-transfer frequency")

    p_run = sub.add_parser("run", help="run the configured heuristic per seed")
    add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="institution-count scaling sweep")
    add_common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_gc.add_argument("--seeds", type=int, default=20)
    p_gc.add_argument("--tolerance", type=float, default=1e-4)
    p_gc.set_defaults(func=cmd_gradcheck)

    p_part = sub.add_parser("partition", help="emit the split manifest only")
    p_part.add_argument("config")
    p_part.add_argument("--output-dir", default=None)
    p_part.set_defaults(func=cmd_partition)

    p_ins = sub.add_parser("inspect", help="print .fwt packet header fields")
    p_ins.add_argument("packet")
    p_ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except transport.TransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
