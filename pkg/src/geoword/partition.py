"""Workload-driven recursive partitioning of the data space into clusters.

The partitioner turns a dataset plus a query workload into a flat list of
*bottom clusters*: disjoint groups of objects, each with a tight MBR and an
inverted file.  Processing one range-keyword query over a clustering ``G``
costs

    w1 * |G|  +  w2 * (keyword-matching objects in clusters relevant to it)

where a cluster is relevant when its MBR overlaps the query region and it
contains at least one object with a query keyword.  Splits are chosen to
minimize that cost summed over the workload: a candidate split coordinate is
learned by gradient descent on a sigmoid-relaxed version of the post-split
object-checking cost (differentiable selectivity estimators), or found by an
exact scan over candidate coordinates (exact estimators), and is accepted
only when the saving in object checks outweighs the extra per-query cluster
check it introduces.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import scan
from .core import Dataset, Query, Rect, Workload

log = logging.getLogger(__name__)


class Axis(IntEnum):
    X = 0
    Y = 1


@dataclass(frozen=True)
class CostWeights:
    """Linear query-cost weights: w1 per cluster check, w2 per object check."""

    w1: float = 0.1
    w2: float = 1.0

    def __post_init__(self) -> None:
        if not (self.w1 > 0.0 and self.w2 > 0.0):
            raise ValueError(f"cost weights must be positive, got {self}")


@dataclass(frozen=True)
class Limits:
    """Recursion stops for subspaces below either floor."""

    min_queries: int = 1
    min_objects: int = 32

    def __post_init__(self) -> None:
        if self.min_queries < 0 or self.min_objects < 0:
            raise ValueError(f"limits must be non-negative, got {self}")


@dataclass(frozen=True)
class SgdConfig:
    """Settings for the gradient-descent split search.

    ``lr_frac`` scales the Adam step size by the coordinate span of the
    subspace being split.  ``restarts`` descents start from evenly spaced
    percentiles of the member coordinates (quartiles for the default 4).
    ``batch_size`` = 0 uses the whole query set per step (deterministic);
    a positive value draws shuffled mini-batches seeded by ``seed``.
    """

    epochs: int = 80
    lr_frac: float = 0.02
    restarts: int = 4
    batch_size: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr_frac > 0.0:
            raise ValueError("lr_frac must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")


@dataclass(frozen=True)
class SubSpace:
    """A rectangle under consideration, its member objects, and the indices
    (into the build workload) of queries that overlap it and share at least
    one keyword with some member."""

    rect: Rect
    object_ids: np.ndarray
    queries: np.ndarray


@dataclass(frozen=True)
class SplitCandidate:
    """A proposed split: axis, coordinate, and the objective value there."""

    dim: Axis
    val: float
    cost: float


@dataclass(frozen=True)
class BottomCluster:
    id: int
    mbr: Rect
    object_ids: np.ndarray
    inverted_file: Mapping[int, np.ndarray]
    labels: frozenset[int]


# --------------------------------------------------------------------- helpers


def _dim_bounds(r: Rect, dim: int) -> tuple[float, float]:
    return (r.xb, r.xu) if dim == 0 else (r.yb, r.yu)


def _split_rect(r: Rect, dim: int, val: float) -> tuple[Rect, Rect]:
    if dim == 0:
        return Rect(r.xb, r.yb, val, r.yu), Rect(val, r.yb, r.xu, r.yu)
    return Rect(r.xb, r.yb, r.xu, val), Rect(r.xb, val, r.xu, r.yu)


def _build_inverted(ds: Dataset, ids: np.ndarray) -> dict[int, np.ndarray]:
    inv: dict[int, list[int]] = {}
    indptr, kwids = ds.kw_indptr, ds.kw_ids
    for oid in ids:
        for k in kwids[indptr[oid]:indptr[oid + 1]]:
            inv.setdefault(int(k), []).append(int(oid))
    # ids are visited in ascending order, so each posting list is sorted
    return {k: np.asarray(v, dtype=np.int64) for k, v in inv.items()}


def make_bottom_cluster(ds: Dataset, w: Workload, cid: int,
                        object_ids: np.ndarray) -> BottomCluster:
    ids = np.sort(np.asarray(object_ids, dtype=np.int64))
    if len(ids) == 0:
        raise ValueError("a bottom cluster must contain at least one object")
    xs, ys = ds.xs[ids], ds.ys[ids]
    mbr = Rect(float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))
    inv = _build_inverted(ds, ids)
    labels = frozenset(
        q.id for q in w
        if mbr.overlaps(q.area) and any(k in inv for k in q.keys)
    )
    return BottomCluster(cid, mbr, ids, inv, labels)


def _cluster_matches(c: BottomCluster, keys: frozenset[int]) -> int:
    """Distinct member objects of c containing >= 1 of the given keywords."""
    parts = [c.inverted_file[k] for k in keys if k in c.inverted_file]
    if not parts:
        return 0
    if len(parts) == 1:
        return len(parts[0])
    return int(len(np.unique(np.concatenate(parts))))


# ------------------------------------------------------------------ cost model


def workload_cost(clusters: Sequence[BottomCluster], w: Workload,
                  cw: CostWeights = CostWeights()) -> float:
    """Total workload cost over a clustering.

    Every query pays ``w1`` per existing cluster (the scan that finds the
    relevant ones) plus ``w2`` per keyword-matching object inside each
    relevant cluster.
    """
    n_clusters = len(clusters)
    total = 0.0
    for q in w:
        checks = 0
        for c in clusters:
            if c.mbr.overlaps(q.area):
                checks += _cluster_matches(c, q.keys)
        total += cw.w1 * n_clusters + cw.w2 * checks
    return total


def profit_loss_check(c_s: float, best_cost: float, w_size: int,
                      cw: CostWeights) -> bool:
    """Accept a split iff the object-check saving beats the added per-query
    cluster check: C_s - w2 * best_cost > w1 * |W|."""
    return c_s - cw.w2 * best_cost > cw.w1 * w_size


# ------------------------------------------------------- relaxed split search


def split_loss(rect: Rect, queries: Sequence[Query], dim: int | Axis,
               split_val: float, estimator) -> float:
    """Sigmoid-relaxed object-checking cost of splitting ``rect`` at
    ``split_val`` along ``dim``.

    Per query, each side contributes its estimated keyword-matching object
    count weighted by sigmoid(3 * signed distance of the split from the
    query bound on that axis) -- a soft version of "does the query overlap
    this side".
    """
    dim = int(dim)
    left, right = _split_rect(rect, dim, split_val)
    total = 0.0
    for q in queries:
        qlo, qhi = _dim_bounds(q.area, dim)
        o1 = estimator.estimate(q.keys, left)
        o2 = estimator.estimate(q.keys, right)
        total += float(expit(3.0 * (split_val - qlo))) * o1
        total += float(expit(3.0 * (qhi - split_val))) * o2
    return total


class SplitObjective:
    """Torch view of :func:`split_loss` along one axis, built once per
    (subspace, axis) so restarts and epochs share the precomputed pieces.

    The estimator's per-model CDF banks supply the only split-value-dependent
    factor; everything else (the opposite-axis CDF deltas, the subspace
    boundary CDF values, each query's signed inclusion-exclusion coefficient
    rows) is folded into constants.  ``loss_t`` reproduces ``split_loss``
    exactly, clamps included, so autograd gradients match finite differences
    of the public function.
    """

    def __init__(self, estimator, rect: Rect, queries: Sequence[Query],
                 dim: int | Axis):
        import torch

        self.dim = int(dim)
        bank = estimator.bank(self.dim)
        other = estimator.bank(1 - self.dim)
        lo, hi = _dim_bounds(rect, self.dim)
        olo, ohi = _dim_bounds(rect, 1 - self.dim)
        with torch.no_grad():
            def at(v: float):
                return torch.tensor(float(v), dtype=torch.float64)

            self._fb = bank.eval_all(at(lo))
            self._fu = bank.eval_all(at(hi))
            d_other = other.eval_all(at(ohi)) - other.eval_all(at(olo))
        self._bank = bank
        counts = torch.from_numpy(np.array(estimator.counts, dtype=np.float64))
        self._counts = counts
        self._scale = counts * d_other
        n_rows = len(estimator.counts)
        m = len(queries)
        signs = torch.zeros((m, n_rows), dtype=torch.float64)
        singles = torch.zeros((m, n_rows), dtype=torch.float64)
        for i, q in enumerate(queries):
            for key, sign in estimator.terms(q.keys):
                r = estimator.row[key]
                signs[i, r] += sign
                if not isinstance(key, tuple):
                    singles[i, r] += 1.0
        self._signs, self._singles = signs, singles
        self._qlo = torch.tensor([_dim_bounds(q.area, self.dim)[0] for q in queries],
                                 dtype=torch.float64)
        self._qhi = torch.tensor([_dim_bounds(q.area, self.dim)[1] for q in queries],
                                 dtype=torch.float64)
        self.n_queries = m

    def loss_t(self, v, rows=None):
        """Relaxed loss at split value ``v`` (0-dim torch tensor); ``rows``
        optionally restricts to a query subset (mini-batching)."""
        import torch

        f = self._bank.eval_all(v)
        e1 = torch.minimum(torch.clamp(self._scale * (f - self._fb), min=0.0),
                           self._counts)
        e2 = torch.minimum(torch.clamp(self._scale * (self._fu - f), min=0.0),
                           self._counts)
        signs, singles, qlo, qhi = self._signs, self._singles, self._qlo, self._qhi
        if rows is not None:
            signs, singles = signs[rows], singles[rows]
            qlo, qhi = qlo[rows], qhi[rows]
        o1 = torch.minimum(torch.clamp(signs @ e1, min=0.0), singles @ e1)
        o2 = torch.minimum(torch.clamp(signs @ e2, min=0.0), singles @ e2)
        side1 = torch.sigmoid(3.0 * (v - qlo))
        side2 = torch.sigmoid(3.0 * (qhi - v))
        return (side1 * o1 + side2 * o2).sum()

    def value(self, val: float) -> float:
        import torch

        with torch.no_grad():
            return float(self.loss_t(torch.tensor(val, dtype=torch.float64)))

    def grad(self, val: float) -> float:
        import torch

        v = torch.tensor(float(val), dtype=torch.float64, requires_grad=True)
        self.loss_t(v).backward()
        return float(v.grad)


def find_optimal_split(ds: Dataset, w: Workload, s: SubSpace, dim: int | Axis,
                       estimator, cfg: SgdConfig = SgdConfig()) -> SplitCandidate | None:
    """Best split of ``s`` along ``dim`` under the given estimator.

    Differentiable estimators get multi-restart Adam descent on the relaxed
    loss; exact estimators get the exhaustive coordinate scan.  Returns None
    when the members have no coordinate spread on ``dim`` (nothing to split)
    or no query reaches the subspace.
    """
    dim = int(dim)
    coords = (ds.xs if dim == 0 else ds.ys)[np.asarray(s.object_ids, dtype=np.int64)]
    vmin, vmax = float(coords.min()), float(coords.max())
    if not vmin < vmax or len(s.queries) == 0:
        return None
    if not getattr(estimator, "differentiable", False):
        return brute_force_best_split(ds, w, s, dim)
    import torch

    queries = [w.queries[int(i)] for i in s.queries]
    objective = SplitObjective(estimator, s.rect, queries, dim)
    span = vmax - vmin
    eps = 1e-9 * span
    lo_lim, hi_lim = vmin + eps, vmax - eps
    percentiles = 100.0 * (np.arange(cfg.restarts) + 1.0) / (cfg.restarts + 1.0)
    inits = np.clip(np.percentile(coords, percentiles), lo_lim, hi_lim)
    rng = np.random.default_rng(cfg.seed)
    m = objective.n_queries
    best_cost, best_val = math.inf, None

    def consider(cost: float, val: float) -> None:
        nonlocal best_cost, best_val
        if cost < best_cost:
            best_cost, best_val = cost, val

    for init in inits:
        v = torch.tensor(float(init), dtype=torch.float64, requires_grad=True)
        opt = torch.optim.Adam([v], lr=cfg.lr_frac * span)
        minibatch = 0 < cfg.batch_size < m
        for _ in range(cfg.epochs):
            if minibatch:
                consider(objective.value(v.item()), v.item())
                perm = rng.permutation(m)
                for start in range(0, m, cfg.batch_size):
                    rows = torch.from_numpy(perm[start:start + cfg.batch_size])
                    opt.zero_grad()
                    objective.loss_t(v, rows).backward()
                    opt.step()
                    with torch.no_grad():
                        v.clamp_(lo_lim, hi_lim)
            else:
                opt.zero_grad()
                loss = objective.loss_t(v)
                consider(loss.item(), v.item())
                loss.backward()
                opt.step()
                with torch.no_grad():
                    v.clamp_(lo_lim, hi_lim)
        consider(objective.value(v.item()), v.item())
    return SplitCandidate(Axis(dim), float(best_val), float(best_cost))


# ------------------------------------------------------------ exact split scan


class _ExactSplitScan:
    """Exact post-split object-checking costs for one subspace and axis.

    Members are sorted by the split coordinate once; each query contributes a
    prefix-sum of its keyword-match mask, so the cost at any split value is a
    searchsorted plus O(queries) arithmetic.
    """

    def __init__(self, ds: Dataset, w: Workload, s: SubSpace, dim: int):
        ids = np.asarray(s.object_ids, dtype=np.int64)
        coords = (ds.xs if dim == 0 else ds.ys)[ids]
        order = np.argsort(coords, kind="stable")
        self._coords = coords[order]
        sorted_ids = ids[order]
        self._cums: list[np.ndarray] = []
        self._qlo: list[float] = []
        self._qhi: list[float] = []
        for i in s.queries:
            q = w.queries[int(i)]
            mask = scan.match_mask(ds.kw_indptr, ds.kw_ids, q.key_array(), sorted_ids)
            self._cums.append(np.concatenate(([0], np.cumsum(mask, dtype=np.int64))))
            lo, hi = _dim_bounds(q.area, dim)
            self._qlo.append(lo)
            self._qhi.append(hi)

    def cost_at(self, vals) -> np.ndarray:
        """Object-checking cost at each candidate split value."""
        vals = np.atleast_1d(np.asarray(vals, dtype=np.float64))
        # members with coordinate <= val land in the lower side
        pos = np.searchsorted(self._coords, vals, side="right")
        total = np.zeros(len(vals), dtype=np.float64)
        for cum, lo, hi in zip(self._cums, self._qlo, self._qhi):
            left = cum[pos]
            right = cum[-1] - left
            total += np.where(lo <= vals, left, 0)
            total += np.where(hi >= vals, right, 0)
        return total


def indicator_split_cost(ds: Dataset, w: Workload, s: SubSpace,
                         dim: int | Axis, val: float) -> float:
    """Exact (hard-indicator) object-checking cost of splitting s at val."""
    return float(_ExactSplitScan(ds, w, s, int(dim)).cost_at([val])[0])


def brute_force_best_split(ds: Dataset, w: Workload, s: SubSpace,
                           dim: int | Axis) -> SplitCandidate | None:
    """Exact minimizer of the post-split object-checking cost along ``dim``.

    Evaluates every distinct member coordinate (via the midpoints between
    consecutive distinct values, which give identical memberships while
    staying strictly inside the range) and returns the cheapest.
    """
    dim = int(dim)
    coords = (ds.xs if dim == 0 else ds.ys)[np.asarray(s.object_ids, dtype=np.int64)]
    distinct = np.unique(coords)
    if len(distinct) < 2 or len(s.queries) == 0:
        return None
    mids = 0.5 * (distinct[:-1] + distinct[1:])
    costs = _ExactSplitScan(ds, w, s, dim).cost_at(mids)
    i = int(np.argmin(costs))
    return SplitCandidate(Axis(dim), float(mids[i]), float(costs[i]))


# ------------------------------------------------------------ cluster builder


def _subspace_queries(ds: Dataset, w: Workload, candidates, rect: Rect,
                      member_ids: np.ndarray) -> np.ndarray:
    """Workload indices (from `candidates`) whose area overlaps rect and whose
    keywords appear on at least one member object."""
    out = []
    for i in candidates:
        q = w.queries[int(i)]
        if not rect.overlaps(q.area):
            continue
        if scan.match_mask(ds.kw_indptr, ds.kw_ids, q.key_array(), member_ids).any():
            out.append(int(i))
    return np.asarray(out, dtype=np.int64)


def root_subspace(ds: Dataset, w: Workload) -> SubSpace:
    all_ids = np.arange(len(ds), dtype=np.int64)
    qs = _subspace_queries(ds, w, range(len(w)), ds.space, all_ids)
    return SubSpace(ds.space, all_ids, qs)


def generate_bottom_clusters(ds: Dataset, w: Workload, estimator,
                             cw: CostWeights = CostWeights(),
                             limits: Limits = Limits(),
                             sgd: SgdConfig = SgdConfig(),
                             root: SubSpace | None = None) -> list[BottomCluster]:
    """Recursively split the data space and emit the resulting clusters.

    Subspaces are processed most-queried first.  Each one is either split at
    the better of the per-axis optima (when the profit test passes) or
    finalized as the tight MBR of its members.  Subspaces under the ``limits``
    floors are finalized immediately.  ``root`` restricts the recursion to a
    given subspace (local repartitioning of one region); by default the whole
    data space is partitioned.
    """
    if len(w) == 0:
        raise ValueError("cannot partition against an empty workload")
    heap: list[tuple[int, int, SubSpace]] = []
    tick = itertools.count()

    def push(s: SubSpace) -> None:
        heapq.heappush(heap, (-len(s.queries), next(tick), s))

    push(root if root is not None else root_subspace(ds, w))
    emitted: list[np.ndarray] = []
    while heap:
        _, _, s = heapq.heappop(heap)
        if len(s.queries) < limits.min_queries or len(s.object_ids) < limits.min_objects:
            emitted.append(s.object_ids)
            continue
        queries = [w.queries[int(i)] for i in s.queries]
        c_s = cw.w2 * sum(estimator.estimate(q.keys, s.rect) for q in queries)
        cand_x = find_optimal_split(ds, w, s, Axis.X, estimator, sgd)
        cand_y = find_optimal_split(ds, w, s, Axis.Y, estimator, sgd)
        if cand_x is not None and (cand_y is None or cand_x.cost <= cand_y.cost):
            best = cand_x
        else:
            best = cand_y
        if best is None or not profit_loss_check(c_s, best.cost, len(w), cw):
            emitted.append(s.object_ids)
            continue
        coords = (ds.xs if best.dim == Axis.X else ds.ys)[s.object_ids]
        left_mask = coords <= best.val
        left_rect, right_rect = _split_rect(s.rect, int(best.dim), best.val)
        for child_ids, child_rect in (
            (s.object_ids[left_mask], left_rect),
            (s.object_ids[~left_mask], right_rect),
        ):
            child_qs = _subspace_queries(ds, w, s.queries, child_rect, child_ids)
            push(SubSpace(child_rect, child_ids, child_qs))
    log.info("partitioned %d objects into %d bottom clusters", len(ds), len(emitted))
    return [make_bottom_cluster(ds, w, cid, ids) for cid, ids in enumerate(emitted)]


# -------------------------------------------------------------- serialization


def save_clusters(clusters: Sequence[BottomCluster], path: str) -> None:
    doc = {
        "version": 1,
        "clusters": [
            {
                "id": c.id,
                "mbr": [c.mbr.xb, c.mbr.yb, c.mbr.xu, c.mbr.yu],
                "object_ids": [int(i) for i in c.object_ids],
                "labels": sorted(c.labels),
            }
            for c in clusters
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_clusters(path: str, ds: Dataset) -> list[BottomCluster]:
    """Load clusters saved by :func:`save_clusters`, rebuilding each inverted
    file from the dataset."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != 1:
        raise ValueError(f"{path}: unsupported cluster file version {doc.get('version')!r}")
    out = []
    for rec in doc["clusters"]:
        ids = np.asarray(rec["object_ids"], dtype=np.int64)
        out.append(BottomCluster(
            int(rec["id"]),
            Rect(*[float(v) for v in rec["mbr"]]),
            ids,
            _build_inverted(ds, ids),
            frozenset(int(i) for i in rec["labels"]),
        ))
    return out
