"""Command-line harness.

    learnidx gen-data --family lognormal --n 200000 --seed 1 --out d1.keys
    learnidx gen-workload --data d1.keys --kind skewed --queries 1000000 --out w.qry
    learnidx grid --out grid.csv
    learnidx augment-ab --preset D1 --workload skewed3 --out ab.csv
    learnidx shift --cache-dir /tmp/cache --out shift.csv

Exit status: 0 on success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import bench
from .augment import DEFAULT_CAP
from .counselor import CACHE_ENV, DEFAULT_K, DEFAULT_TAU
from .models import ModelArch, TrainConfig
from .workload import (
    PRESETS,
    DatasetSpec,
    LogNormal,
    Uniform,
    WorkloadSpec,
    extract_frequencies,
    gen_dataset,
    gen_workload,
    hot_range,
    load_dataset,
    preset_spec,
    read_keys,
    write_keys,
)

log = logging.getLogger("learnidx")


def parse_search_space(text: str, default_m: int) -> list[tuple[ModelArch, int]]:
    space = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        arch, _, m = item.partition(":")
        space.append((ModelArch.parse(arch), int(m) if m else default_m))
    if not space:
        raise ValueError("empty search space")
    return space


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--mode", choices=("deterministic", "calibrated"), default="deterministic")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n", type=int, default=bench.DESK_N, help="keys per generated dataset")
    p.add_argument("--queries", type=int, default=bench.DESK_QUERIES)
    p.add_argument("--search-space", default="LIN,NN4,NN8,NN16,NN2-4,NN2-8", help="ARCH[:M],... e.g. LIN:200,NN8:400")
    p.add_argument("--leaves", type=int, default=bench.DESK_M, help="M for search-space items without one")
    p.add_argument("--k-sketch", type=int, default=DEFAULT_K)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--cap", type=float, default=DEFAULT_CAP)
    p.add_argument("--cache-dir", help=f"model cache directory (overrides ${CACHE_ENV})")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--fine-tune-epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--sample-rate", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="learnidx", description="Learned range index benchmark harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a sorted key file")
    g.add_argument("--family", choices=("uniform", "lognormal", "preset"), default="preset")
    g.add_argument("--preset", choices=sorted(PRESETS), default="D1")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--key-space-max", type=int, default=10**9)
    g.add_argument("--mu", type=float, default=0.0)
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.add_argument("--text", action="store_true", help="decimal, one key per line")

    w = sub.add_parser("gen-workload", help="generate a query key file")
    w.add_argument("--data", help="dataset .keys file (default: generate --preset)")
    w.add_argument("--preset", choices=sorted(PRESETS), default="D1")
    w.add_argument("--n", type=int, default=bench.DESK_N)
    w.add_argument("--kind", choices=("uniform", "skewed"), default="uniform")
    w.add_argument("--hot-frac", type=float, default=0.05)
    w.add_argument("--hot-prob", type=float, default=0.95)
    w.add_argument("--hot-start", type=float, default=0.0)
    w.add_argument("--queries", type=int, required=True)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out")
    w.add_argument("--text", action="store_true")

    gr = sub.add_parser("grid", help="architecture x dataset x workload grid")
    _common(gr)
    gr.add_argument("--presets", default=",".join(PRESETS))
    gr.add_argument("--workloads", default=",".join(bench.WORKLOADS))
    gr.add_argument("--data", action="append", default=[], metavar="ID=PATH", help="use a key file as dataset ID")
    gr.add_argument("--workload-file", action="append", default=[], metavar="ID:WL=PATH", help="query file for dataset ID")

    ab = sub.add_parser("augment-ab", help="none vs duplicate vs stretch under auto-tuning")
    _common(ab)
    ab.add_argument("--preset", choices=sorted(PRESETS), default="D1")
    ab.add_argument("--workload", choices=[w for w in bench.WORKLOADS if w != "uniform"], default="skewed3")
    ab.add_argument("--data", help="dataset .keys file instead of the preset")
    ab.add_argument("--workload-file", help="query .qry file instead of the generated workload")

    sh = sub.add_parser("shift", help="cold build, distribution swap, warm rebuild from the cache")
    _common(sh)
    sh.add_argument("--preset", choices=sorted(PRESETS), default="D1")
    sh.add_argument("--swap-to", choices=sorted(PRESETS), help="swap to another preset instead of churned keys")
    return parser


def _experiment_config(args) -> bench.ExperimentConfig:
    import os

    cache_dir = args.cache_dir or os.environ.get(CACHE_ENV) or None
    return bench.ExperimentConfig(
        N=args.n,
        num_queries=args.queries,
        search_space=parse_search_space(args.search_space, args.leaves),
        train=TrainConfig(args.epochs, args.lr, args.batch_size, args.seed, args.fine_tune_epochs),
        seed=args.seed,
        mode=args.mode,
        sample_rate=args.sample_rate,
        cap=args.cap,
        K=args.k_sketch,
        tau=args.tau,
        cache_dir=cache_dir,
    )


def _csv_text(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def emit(tables: dict, main: str, args) -> None:
    """Write the ``main`` table to ``--out``; other tables go to ``<stem>.<name>.csv``."""
    if args.format == "json":
        text = json.dumps(tables, indent=1, sort_keys=True) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return
    if not args.out:
        for name, rows in tables.items():
            if name != main:
                sys.stdout.write(f"# {name}\n")
            sys.stdout.write(_csv_text(rows))
        return
    out = Path(args.out)
    out.write_text(_csv_text(tables[main]))
    for name, rows in tables.items():
        if name != main and rows:
            out.with_name(f"{out.stem}.{name}.csv").write_text(_csv_text(rows))


def cmd_gen_data(args) -> int:
    if args.family == "uniform":
        family = Uniform()
    elif args.family == "lognormal":
        family = LogNormal(args.mu, args.sigma)
    else:
        family = PRESETS[args.preset]
    data = gen_dataset(DatasetSpec(family, args.n, args.key_space_max, args.seed))
    write_keys(args.out, data.keys, text=args.text)
    log.info("wrote %d keys to %s", data.N, args.out)
    return 0


def cmd_gen_workload(args) -> int:
    data = load_dataset(args.data) if args.data else gen_dataset(preset_spec(args.preset, args.n, args.seed))
    spec = WorkloadSpec(args.kind, args.queries, args.seed, args.hot_frac, args.hot_prob, args.hot_start)
    queries = gen_workload(spec, data)
    if args.out:
        write_keys(args.out, queries, text=args.text)
    summary = {"queries": int(queries.size), "dataset_keys": data.N}
    if args.kind == "skewed":
        start, stop = hot_range(spec, data.N)
        hist = extract_frequencies(queries, data)
        summary.update(hot_start=start, hot_stop=stop, hot_mass=hist.mass(start, stop))
    sys.stdout.write(json.dumps(summary) + "\n")
    return 0


def cmd_grid(args) -> int:
    cfg = _experiment_config(args)
    cfg.presets = tuple(p for p in args.presets.split(",") if p)
    cfg.workloads = tuple(w for w in args.workloads.split(",") if w)
    datasets = None
    if args.data:
        datasets = {}
        for item in args.data:
            d_id, _, path = item.partition("=")
            datasets[d_id] = load_dataset(path)
    workloads = None
    if args.workload_file:
        workloads = {}
        for item in args.workload_file:
            key, _, path = item.partition("=")
            d_id, _, w_id = key.partition(":")
            workloads.setdefault(d_id, {})[w_id] = read_keys(path)
    tables = bench.run_grid(cfg, datasets, workloads)
    emit(tables, "rows", args)
    return 0


def cmd_augment_ab(args) -> int:
    cfg = _experiment_config(args)
    data = load_dataset(args.data) if args.data else None
    queries = read_keys(args.workload_file) if args.workload_file else None
    out = bench.run_augment_ab(cfg, args.preset, args.workload, data, queries)
    candidates = []
    for variant, table in out["candidates"].items():
        for c in table:
            candidates.append(
                {
                    "schema_version": bench.SCHEMA_VERSION,
                    "variant": variant,
                    "arch": c.arch.name,
                    "M": c.M,
                    "status": c.status,
                    "cost_proxy": bench._fmt(c.cost),
                    "mean_bound_width": bench._fmt(c.mean_width),
                    "weighted_bound_width": bench._fmt(c.weighted_width),
                }
            )
    emit({"rows": out["rows"], "candidates": candidates}, "rows", args)
    return 0


def cmd_shift(args) -> int:
    cfg = _experiment_config(args)
    r = bench.run_shift(cfg, args.preset, args.swap_to)
    row = {
        "schema_version": bench.SCHEMA_VERSION,
        "dataset": args.preset,
        "swap_to": args.swap_to or f"{args.preset}+churn5%",
        "cold_arch": r.cold_arch,
        "warm_arch": r.warm_arch,
        "provenance": r.provenance,
        "sketch_mse": f"{r.sketch_mse:.6g}",
        "shift_detected": int(r.shift_detected),
        "baseline_cost": bench._fmt(r.baseline_cost),
        "recent_cost": bench._fmt(r.recent_cost),
        "cold_seconds": bench._fmt(r.cold_seconds),
        "warm_seconds": bench._fmt(r.warm_seconds),
        "warm_cold_ratio": bench._fmt(r.ratio),
        "exactness": bench._fmt(r.exactness),
    }
    emit({"rows": [row]}, "rows", args)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "gen-workload": cmd_gen_workload,
    "grid": cmd_grid,
    "augment-ab": cmd_augment_ab,
    "shift": cmd_shift,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"learnidx {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
