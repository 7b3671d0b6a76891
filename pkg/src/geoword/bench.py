"""Benchmark harness: runs a test workload against the learned index and the
baseline layouts, verifying every result against the brute-force scan before
any timing, then reports latency and access statistics as JSON plus an
aligned CSV.
"""

from __future__ import annotations

import csv
import json
import time
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .baselines import BruteForce, grid_matching_cluster_count
from .core import Dataset, Query, Workload, query_bruteforce
from .index import (
    GeoWordIndex,
    QueryStats,
    assemble_index,
    index_leaves,
    query_range,
)
from .partition import BottomCluster


class BaselineKind(str, Enum):
    BRUTE_FORCE = "brute_force"
    UNIFORM_GRID_IF = "uniform_grid_if"
    FLAT_CLUSTERS = "flat_clusters"


AGGREGATE_METRICS = (
    "mean_micros",
    "median_micros",
    "p99_micros",
    "mean_nodes_accessed",
    "mean_objects_checked",
    "index_bytes",
    "build_seconds",
)


class VerificationError(AssertionError):
    """A benchmarked index returned something other than the scan oracle."""


def leaves_as_clusters(idx: GeoWordIndex) -> list[BottomCluster]:
    """The index's leaves, repackaged as bottom clusters (labels dropped)."""
    return [
        BottomCluster(i, lf.mbr, lf.object_ids, dict(lf.inverted_file),
                      frozenset())
        for i, lf in enumerate(index_leaves(idx))
    ]


def build_baseline(kind: BaselineKind | str, ds: Dataset,
                   learned: GeoWordIndex | None = None):
    """Instantiate a baseline; the grid and flat layouts size themselves
    from the learned index's leaf count so comparisons are like for like."""
    kind = BaselineKind(kind)
    if kind is BaselineKind.BRUTE_FORCE:
        return BruteForce(ds)
    if learned is None:
        raise ValueError(f"baseline {kind.value} needs the learned index "
                         f"to match its cluster count")
    n_leaves = len(index_leaves(learned))
    if kind is BaselineKind.UNIFORM_GRID_IF:
        return grid_matching_cluster_count(ds, n_leaves)
    return assemble_index(leaves_as_clusters(learned), [], ds)


def _runner(index) -> Callable[[Query], tuple[np.ndarray, QueryStats]]:
    if isinstance(index, GeoWordIndex):
        return lambda q: query_range(index, q)
    return index.query_range


def run_bench(indexes: Mapping[str, Any], ds: Dataset, w: Workload, *,
              repetitions: int = 100, seed: int = 0, config_hash: str = "",
              index_bytes: Mapping[str, int] | None = None,
              build_seconds: Mapping[str, float] | None = None,
              ) -> dict[str, Any]:
    """Benchmark every index on every query of ``w``.

    Phase one verifies each index's results against the brute-force scan
    (and doubles as the warm-up pass); any mismatch raises
    VerificationError naming the index and query id, and no report exists.
    Phase two times each query over ``repetitions`` runs of the monotonic
    clock and records per-query stats.  All non-timing report fields are
    deterministic for a fixed seed/config.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if not w.queries:
        raise ValueError("benchmark workload is empty")
    index_bytes = dict(index_bytes or {})
    build_seconds = dict(build_seconds or {})

    oracle = {q.id: query_bruteforce(ds, q) for q in w.queries}

    # --- verification pass (also the warm-up; excluded from timing) -------
    recorded: dict[str, list[QueryStats]] = {}
    for name, index in indexes.items():
        run = _runner(index)
        stats_rows: list[QueryStats] = []
        for q in w.queries:
            got, stats = run(q)
            if not np.array_equal(got, oracle[q.id]):
                raise VerificationError(
                    f"index {name!r} diverged from brute force on query "
                    f"{q.id}")
            stats_rows.append(stats)
        recorded[name] = stats_rows

    # --- timing pass ------------------------------------------------------
    report: dict[str, Any] = {
        "seed": seed,
        "config_hash": config_hash,
        "repetitions": repetitions,
        "n_queries": len(w.queries),
        "indexes": {},
    }
    for name, index in indexes.items():
        run = _runner(index)
        per_query: list[dict[str, Any]] = []
        micros: list[float] = []
        for q, stats in zip(w.queries, recorded[name]):
            t0 = time.perf_counter_ns()
            for _ in range(repetitions):
                run(q)
            us = (time.perf_counter_ns() - t0) / repetitions / 1e3
            micros.append(us)
            per_query.append({
                "query_id": q.id,
                "nodes_accessed": stats.nodes_accessed,
                "objects_checked": stats.objects_checked,
                "result_count": stats.results,
                "micros": us,
            })
        arr = np.array(micros)
        report["indexes"][name] = {
            "mean_micros": float(arr.mean()),
            "median_micros": float(np.median(arr)),
            "p99_micros": float(np.percentile(arr, 99)),
            "mean_nodes_accessed": float(np.mean(
                [s.nodes_accessed for s in recorded[name]])),
            "mean_objects_checked": float(np.mean(
                [s.objects_checked for s in recorded[name]])),
            "index_bytes": int(index_bytes.get(name, 0)),
            "build_seconds": float(build_seconds.get(name, 0.0)),
            "per_query": per_query,
        }
    return report


def write_report(report: dict[str, Any], json_path: str | Path,
                 csv_path: str | Path) -> None:
    """JSON as-is; CSV flattened to exactly one row per (index, metric)."""
    with open(json_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["index", "metric", "value"])
        for name in sorted(report["indexes"]):
            row = report["indexes"][name]
            for metric in AGGREGATE_METRICS:
                wr.writerow([name, metric, row[metric]])
