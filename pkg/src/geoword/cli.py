"""Command-line front end: data ingestion, workload generation, index
builds, verified querying, benchmarking, inserts, and workload-shift replay.

Every command exits 0 only when its work completed and, where applicable,
every result was verified against the brute-force scan.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import BaselineKind, build_baseline, run_bench, write_report
from .config import RunConfig, config_hash, load_config
from .core import (
    Dataset,
    GeoObject,
    GeoPoint,
    Query,
    Rect,
    Workload,
    generate_workload,
    load_dataset,
    query_bruteforce,
    save_dataset,
    save_workload,
)
from .index import (
    GeoWordIndex,
    RetrainConfig,
    current_dataset,
    deserialize_index,
    insert_object,
    query_range,
    serialize_index,
    structural_hash,
    swap_retrain,
)
from .pipeline import (
    StageFailure,
    build_index,
    load_inputs,
    make_estimator_factory,
)

log = logging.getLogger(__name__)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="TOML or JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out-dir", default="out", help="artifact directory")


def _cfg(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    return load_config(args.config, overrides)


def _retrain_config(cfg: RunConfig) -> RetrainConfig:
    return RetrainConfig(
        weights=cfg.weights, limits=cfg.limits, sgd=cfg.sgd,
        rl=replace(cfg.rl, group_ratio=cfg.clustering_ratio),
        seed=cfg.seed, estimator_factory=make_estimator_factory(cfg))


def _load_built(cfg: RunConfig, out: Path,
                workload: Workload | None = None,
                ) -> tuple[Dataset, GeoWordIndex]:
    ds, w = load_inputs(cfg)
    path = out / "index.json"
    if not path.exists():
        raise FileNotFoundError(f"{path}: no built index (run `build` first)")
    idx = deserialize_index(str(path), ds, workload=workload or w,
                            retrain=_retrain_config(cfg))
    return ds, idx


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _cfg(args)
    src = args.input or cfg.dataset
    if not src:
        raise ValueError("ingest needs --input or a config dataset path")
    fmt = "jsonl" if src.endswith((".jsonl", ".ndjson")) else "csv"
    ds = load_dataset(src, fmt=fmt)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dst = out / "dataset.jsonl"
    save_dataset(ds, str(dst))
    meta = {"objects": len(ds), "keywords": len(ds.dictionary),
            "source": src, "dataset": str(dst)}
    with open(out / "dataset_meta.json", "w") as f:
        json.dump(meta, f, indent=2)
    print(f"ingested {len(ds)} objects, {len(ds.dictionary)} keywords "
          f"-> {dst}")
    return 0


def cmd_gen_workload(args: argparse.Namespace) -> int:
    cfg = _cfg(args)
    ds, _ = load_inputs(cfg)
    spec = cfg.workload_spec
    if args.rng_seed is not None:
        spec = replace(spec, rng_seed=args.rng_seed)
    w = generate_workload(ds, spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dst = out / args.name
    save_workload(w, ds, str(dst))
    print(f"wrote {len(w.queries)} queries -> {dst}")
    return 0


def cmd_build(args: argparse.Namespace) -> int:
    cfg = _cfg(args)
    ds, w = load_inputs(cfg)
    idx, metrics = build_index(cfg, ds, w, out_dir=args.out_dir)
    for stage, secs in metrics["stages"].items():
        print(f"stage {stage}: {secs:.3f}s")
    print(f"built {metrics['n_clusters']} clusters, levels "
          f"{metrics['levels']}, hash {metrics['structural_hash'][:12]}")
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    cfg = _cfg(args)
    out = Path(args.out_dir)
    ds, idx = _load_built(cfg, out)
    w = _test_workload(cfg, ds, args)
    truth = current_dataset(idx)
    rows = []
    failures = 0
    for q in w.queries:
        t0 = time.perf_counter_ns()
        got, stats = query_range(idx, q)
        us = (time.perf_counter_ns() - t0) / 1e3
        want = query_bruteforce(truth, q)
        if not np.array_equal(got, want):
            failures += 1
            log.error("query %d diverged from brute force", q.id)
        rows.append({"query_id": q.id, "nodes_accessed": stats.nodes_accessed,
                     "objects_checked": stats.objects_checked,
                     "result_count": stats.results, "micros": us})
    with open(out / "query_stats.json", "w") as f:
        json.dump(rows, f, indent=2)
    print(f"{len(rows)} queries, {failures} verification failures")
    return 1 if failures else 0


def _test_workload(cfg: RunConfig, ds: Dataset, args) -> Workload:
    """Benchmark queries: an explicit file if given, otherwise generated
    from the config spec with a shifted rng seed so they are disjoint from
    the training workload."""
    path = getattr(args, "test_workload", None)
    if path:
        from .core import load_workload

        return load_workload(path, ds)
    spec = replace(cfg.workload_spec, rng_seed=cfg.workload_spec.rng_seed + 10_000)
    return generate_workload(ds, spec)


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _cfg(args)
    out = Path(args.out_dir)
    ds, idx = _load_built(cfg, out)
    w = _test_workload(cfg, ds, args)

    build_secs = {}
    metrics_path = out / "build_metrics.json"
    if metrics_path.exists():
        with open(metrics_path) as f:
            build_secs["geoword"] = json.load(f).get("total_seconds", 0.0)

    indexes: dict[str, object] = {"geoword": idx}
    sizes = {"geoword": (out / "index.json").stat().st_size}
    for kind in args.baselines.split(","):
        kind = kind.strip()
        if not kind:
            continue
        base = build_baseline(kind, ds, learned=idx)
        indexes[kind] = base
        if isinstance(base, GeoWordIndex):
            p = out / f"baseline_{kind}.json"
            serialize_index(base, str(p))
            sizes[kind] = p.stat().st_size
        else:
            sizes[kind] = 0
    report = run_bench(indexes, ds, w, repetitions=cfg.repetitions,
                       seed=cfg.seed, config_hash=config_hash(cfg),
                       index_bytes=sizes, build_seconds=build_secs)
    write_report(report, out / "report.json", out / "report.csv")
    for name in sorted(report["indexes"]):
        row = report["indexes"][name]
        print(f"{name}: mean {row['mean_micros']:.1f}us, "
              f"nodes {row['mean_nodes_accessed']:.1f}, "
              f"checked {row['mean_objects_checked']:.1f}")
    return 0


def cmd_insert(args: argparse.Namespace) -> int:
    cfg = _cfg(args)
    out = Path(args.out_dir)
    ds, idx = _load_built(cfg, out)
    rng = np.random.default_rng(cfg.seed)
    space = ds.space
    all_kws = np.array(sorted(ds.words), dtype=np.int64)
    start = len(current_dataset(idx))
    failures = 0
    for i in range(args.count):
        k = int(rng.integers(1, min(3, len(all_kws)) + 1))
        o = GeoObject(
            start + i,
            GeoPoint(float(rng.uniform(space.xb, space.xu)),
                     float(rng.uniform(space.yb, space.yu))),
            frozenset(int(v) for v in rng.choice(all_kws, size=k, replace=False)))
        insert_object(idx, o)
        probe = Query(0, Rect(o.loc.x, o.loc.y, o.loc.x, o.loc.y),
                      frozenset({next(iter(o.kws))}))
        got, _ = query_range(idx, probe)
        if o.id not in got:
            failures += 1
            log.error("inserted object %d not visible to queries", o.id)
    serialize_index(idx, str(out / "index.json"))
    print(f"inserted {args.count} objects ({failures} visibility failures), "
          f"buffer now {len(idx.insert_buffer)}")
    return 1 if failures else 0


def cmd_shift(args: argparse.Namespace) -> int:
    cfg = _cfg(args)
    out = Path(args.out_dir)
    ds, idx = _load_built(cfg, out)
    series = replay_shift(
        idx, ds, cfg, phases=args.phases,
        queries_per_phase=args.queries_per_phase,
        window=args.window, constant=args.constant)
    with open(out / "shift_series.json", "w") as f:
        json.dump(series, f, indent=2)
    import csv as _csv

    with open(out / "shift_series.csv", "w", newline="") as f:
        wr = _csv.writer(f)
        wr.writerow(["phase", "window", "mean_micros", "mean_nodes_accessed",
                     "swap_generation"])
        for row in series["windows"]:
            wr.writerow([row["phase"], row["window"], row["mean_micros"],
                         row["mean_nodes_accessed"], row["swap_generation"]])
    verified = series["verified_queries"]
    failures = series["verification_failures"]
    print(f"replayed {args.phases} phases, {verified} queries verified, "
          f"{failures} failures, {series['swaps_applied']} swaps applied")
    return 1 if failures else 0


def replay_shift(idx: GeoWordIndex, ds: Dataset, cfg: RunConfig, *,
                 phases: int, queries_per_phase: int, window: int,
                 constant: bool = False) -> dict:
    """Replay workload phases against a live index.

    Each phase draws a fresh workload (the same one every phase when
    ``constant``); at each phase boundary a non-blocking background rebuild
    on the new workload starts, while the replay keeps querying — every
    result verified against brute force — and records per-window mean
    latency and node accesses.  Builds are serialized internally, so at
    most one runs at a time.
    """
    windows: list[dict] = []
    verified = failures = 0
    seen_hashes = {structural_hash(idx)}
    truth = current_dataset(idx)
    for phase in range(phases):
        spec = replace(cfg.workload_spec,
                       count=queries_per_phase,
                       rng_seed=cfg.workload_spec.rng_seed
                       + (0 if constant else 1 + phase))
        w = generate_workload(ds, spec)
        if phase > 0 and not constant:
            swap_retrain(idx, w, budget=0)
        lat: list[float] = []
        nodes: list[int] = []
        wno = 0
        for pos, q in enumerate(w.queries[:queries_per_phase]):
            t0 = time.perf_counter_ns()
            got, stats = query_range(idx, q)
            lat.append((time.perf_counter_ns() - t0) / 1e3)
            nodes.append(stats.nodes_accessed)
            want = query_bruteforce(truth, q)
            verified += 1
            if not np.array_equal(got, want):
                failures += 1
                log.error("phase %d query %d diverged", phase, q.id)
            if len(lat) == window or pos == queries_per_phase - 1:
                seen_hashes.add(structural_hash(idx))
                windows.append({
                    "phase": phase, "window": wno,
                    "mean_micros": float(np.mean(lat)),
                    "mean_nodes_accessed": float(np.mean(nodes)),
                    "swap_generation": len(seen_hashes) - 1,
                })
                lat, nodes = [], []
                wno += 1
    return {
        "windows": windows,
        "phases": phases,
        "swaps_applied": len(seen_hashes) - 1,
        "verified_queries": verified,
        "verification_failures": failures,
    }


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="geoword",
        description="workload-aware spatial keyword index toolkit")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("ingest", help="normalize a dataset file")
    _common(p)
    p.add_argument("--input", default=None, help="csv or jsonl source")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("gen-workload", help="generate a query workload")
    _common(p)
    p.add_argument("--name", default="workload.json")
    p.add_argument("--rng-seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen_workload)

    p = sub.add_parser("build", help="build the index end to end")
    _common(p)
    p.add_argument("--dataset", default=None, help="override dataset path")
    p.set_defaults(fn=cmd_build)

    p = sub.add_parser("query", help="run verified queries against the index")
    _common(p)
    p.add_argument("--test-workload", default=None)
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("bench", help="benchmark against baselines")
    _common(p)
    p.add_argument("--test-workload", default=None)
    p.add_argument("--baselines",
                   default=",".join(k.value for k in BaselineKind))
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("insert", help="stream random inserts into the index")
    _common(p)
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(fn=cmd_insert)

    p = sub.add_parser("shift", help="replay workload phases with retrains")
    _common(p)
    p.add_argument("--phases", type=int, default=3)
    p.add_argument("--queries-per-phase", type=int, default=60)
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--constant", action="store_true",
                   help="same workload every phase (control run)")
    p.set_defaults(fn=cmd_shift)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (StageFailure, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
