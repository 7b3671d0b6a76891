"""Reference competitors for the learned index: a linear scan and a uniform
grid, both answering the same range and kNN queries with the same stats
accounting so benchmark comparisons are apples to apples.
"""

from __future__ import annotations

import math

import numpy as np

from .core import Dataset, GeoPoint, Query, Rect, query_bruteforce
from .index import GeoWordIndex, QueryStats, assemble_index
from .partition import BottomCluster, _build_inverted


class BruteForce:
    """No index at all: every query scans the whole dataset.

    By definition it touches zero index nodes and checks every object, which
    pins down the two ends of the stats scale for everything else.
    """

    def __init__(self, ds: Dataset):
        self.ds = ds
        self.stats_nodes = 0

    def query_range(self, q: Query) -> tuple[np.ndarray, QueryStats]:
        ids = query_bruteforce(self.ds, q)
        return ids, QueryStats(nodes_accessed=0,
                               objects_checked=len(self.ds),
                               results=len(ids))

    def query_bknn(self, center: GeoPoint, keys, k: int) -> list[tuple[int, float]]:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        keys = frozenset(int(x) for x in keys)
        rows = []
        for o in self.ds.objects:
            if o.kws & keys:
                rows.append((math.hypot(o.loc.x - center.x, o.loc.y - center.y),
                             o.id))
        rows.sort()
        return [(oid, d) for d, oid in rows[:k]]


def build_uniform_grid(ds: Dataset, cells_per_dim: int,
                       **index_kwargs) -> GeoWordIndex:
    """Keyword-blind baseline: an equal-width grid over the dataset's
    bounding box, one leaf per non-empty cell.

    Leaf MBRs are the full cell rectangles (not tightened to the members),
    the way a precomputed grid would store them.  Objects go to the cell
    containing their point, with the top/right boundary rows clamped inward
    so every object lands in exactly one cell.  A 1x1 grid is therefore a
    single leaf spanning the bounding box.
    """
    if cells_per_dim < 1:
        raise ValueError(f"cells_per_dim must be >= 1, got {cells_per_dim}")
    space = ds.space
    side = cells_per_dim
    w = (space.xu - space.xb) / side
    h = (space.yu - space.yb) / side
    if w <= 0 or h <= 0:
        side = 1  # degenerate extent: everything shares one cell
        w = max(w, 1.0)
        h = max(h, 1.0)

    ix = np.clip(((ds.xs - space.xb) / w).astype(np.int64), 0, side - 1)
    iy = np.clip(((ds.ys - space.yb) / h).astype(np.int64), 0, side - 1)
    cell = ix * side + iy

    clusters: list[BottomCluster] = []
    for c in np.unique(cell):
        ids = np.sort(np.flatnonzero(cell == c)).astype(np.int64)
        i, j = int(c // side), int(c % side)
        rect = Rect(space.xb + i * w, space.yb + j * h,
                    space.xb + (i + 1) * w, space.yb + (j + 1) * h)
        clusters.append(BottomCluster(len(clusters), rect, ids,
                                      _build_inverted(ds, ids), frozenset()))
    return assemble_index(clusters, [], ds, **index_kwargs)


def grid_matching_cluster_count(ds: Dataset, k: int) -> GeoWordIndex:
    """The uniform grid whose non-empty cell count comes closest to ``k``
    (ties to the coarser grid), for equal-size layout comparisons."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    best: tuple[int, int] | None = None  # (|count - k|, side)
    side = 1
    while True:
        n = _nonempty_cells(ds, side)
        if best is None or abs(n - k) < best[0]:
            best = (abs(n - k), side)
        # non-empty counts grow (weakly) with side; once past k they only
        # move away from it
        if n >= k or side > len(ds):
            break
        side += 1
    return build_uniform_grid(ds, best[1])


def _nonempty_cells(ds: Dataset, side: int) -> int:
    space = ds.space
    w = (space.xu - space.xb) / side or 1.0
    h = (space.yu - space.yb) / side or 1.0
    ix = np.clip(((ds.xs - space.xb) / w).astype(np.int64), 0, side - 1)
    iy = np.clip(((ds.ys - space.yb) / h).astype(np.int64), 0, side - 1)
    return len(np.unique(ix * side + iy))
