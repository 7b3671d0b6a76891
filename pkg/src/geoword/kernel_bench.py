"""Micro-benchmark comparing the compiled scan kernels with the numpy
fallback on identical inputs.

Run as ``python -m geoword.kernel_bench``.  Both implementations are
imported directly (ignoring the GEOWORD_PURE dispatch) so the comparison
works no matter which backend the package selected; outputs are checked for
equality before anything is timed.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import _scan_py
from .scan import BACKEND

try:
    from . import _scan
except ImportError:  # pragma: no cover - depends on the build
    _scan = None

KERNELS = ("match_mask", "query_ids", "count_matching", "filter_rect")


def synth(n: int, n_kws: int, n_queries: int, seed: int):
    """Columnar dataset (uniform points, 1-3 keywords each) plus queries."""
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0.0, 100.0, size=n)
    ys = rng.uniform(0.0, 100.0, size=n)
    counts = rng.integers(1, 4, size=n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    kwids = rng.integers(0, n_kws, size=int(indptr[-1])).astype(np.int32)
    row_of = np.repeat(np.arange(n), counts)
    kwids = kwids[np.lexsort((kwids, row_of))]  # sort ids within each row

    queries = []
    for _ in range(n_queries):
        cx, cy = rng.uniform(5, 95, size=2)
        half = rng.uniform(1.0, 10.0)
        qkeys = np.unique(rng.integers(0, n_kws, size=3)).astype(np.int32)
        queries.append((qkeys, cx - half, cy - half, cx + half, cy + half))
    sample = rng.choice(n, size=max(1, n // 20), replace=False)
    ids = np.sort(sample).astype(np.int64)
    return xs, ys, indptr, kwids, queries, ids


def _calls(impl, xs, ys, indptr, kwids, queries, ids):
    def run(kernel: str):
        out = []
        for qkeys, xb, yb, xu, yu in queries:
            if kernel == "match_mask":
                out.append(impl.match_mask(indptr, kwids, qkeys, ids))
            elif kernel == "query_ids":
                out.append(impl.query_ids(xs, ys, indptr, kwids, qkeys,
                                          xb, yb, xu, yu))
            elif kernel == "count_matching":
                out.append(impl.count_matching(xs, ys, indptr, kwids, qkeys,
                                               xb, yb, xu, yu, ids))
            else:
                out.append(impl.filter_rect(xs, ys, ids, xb, yb, xu, yu))
        return out

    return run


def _equal(kernel: str, a, b) -> bool:
    if kernel == "count_matching":
        return all(int(x) == int(y) for x, y in zip(a, b))
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(
        description="compare compiled and pure-python scan kernels")
    ap.add_argument("--objects", type=int, default=200_000)
    ap.add_argument("--keywords", type=int, default=100)
    ap.add_argument("--queries", type=int, default=100)
    ap.add_argument("--repetitions", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    data = synth(args.objects, args.keywords, args.queries, args.seed)
    print(f"dataset: {args.objects} objects, {args.keywords} keywords, "
          f"{args.queries} queries x {args.repetitions} reps "
          f"(package backend: {BACKEND})")

    impls = {"python": _scan_py}
    if _scan is not None:
        impls["compiled"] = _scan
    else:
        print("compiled extension not available; timing the fallback only")

    runners = {name: _calls(impl, *data) for name, impl in impls.items()}
    per_query: dict[tuple[str, str], float] = {}
    for kernel in KERNELS:
        outputs = {name: run(kernel) for name, run in runners.items()}
        if "compiled" in outputs and not _equal(
                kernel, outputs["compiled"], outputs["python"]):
            print(f"error: backends disagree on {kernel}", file=sys.stderr)
            return 1
        for name, run in runners.items():
            best = float("inf")
            for _ in range(args.repetitions):
                t0 = time.perf_counter_ns()
                run(kernel)
                best = min(best, time.perf_counter_ns() - t0)
            per_query[(kernel, name)] = best / 1e3 / args.queries

    width = max(len(k) for k in KERNELS)
    header = f"{'kernel':<{width}}  {'python us/q':>12}"
    if "compiled" in impls:
        header += f"  {'compiled us/q':>14}  {'speedup':>8}"
    print(header)
    for kernel in KERNELS:
        line = (f"{kernel:<{width}}  "
                f"{per_query[(kernel, 'python')]:>12.2f}")
        if "compiled" in impls:
            c = per_query[(kernel, "compiled")]
            line += (f"  {c:>14.2f}"
                     f"  {per_query[(kernel, 'python')] / c:>7.2f}x")
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
