"""Tree assembly, instrumented query execution, and dynamic maintenance.

The assembled index is a tree whose leaves hold bottom clusters (tight MBR,
member ids, per-keyword inverted lists) and whose internal nodes hold a
covering MBR plus a keyword bitmap (bit k set iff some descendant object
contains keyword k).  Range queries run breadth-first: a child is visited
only when its MBR overlaps the query area and its bitmap shares a keyword,
and every such test is counted, so layouts are compared by `nodes_accessed`
and `objects_checked` while results are always exact.

Maintenance comes in three flavors: single-object inserts are routed to a
leaf, made visible immediately, and buffered; a full buffer (or a batch of
new queries) triggers a local repartition of just the affected leaves; and
`swap_retrain` rebuilds the whole index in a background thread while the old
tree keeps serving, publishing the replacement with one atomic reference
swap.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import math
import threading
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .cdfs import ExactCountEstimator
from .core import Dataset, GeoObject, GeoPoint, Query, Rect, Workload
from .packing import RlConfig, UpperNode, build_hierarchy
from .partition import (
    BottomCluster,
    CostWeights,
    Limits,
    SgdConfig,
    SubSpace,
    generate_bottom_clusters,
)
from .partition import _subspace_queries as subspace_queries

log = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1

# Dictionaries wider than this use a hashed bitmap (bit = id mod 2^16, one
# hash).  Hashing can only add false positives to node pruning; leaf inverted
# files stay exact, so results never change.
_HASHED_BITS = 1 << 16


# -------------------------------------------------------------- domain types


@dataclass
class LeafNode:
    """Bottom node: tight MBR, sorted member ids, and per-keyword sorted
    posting lists covering exactly the members' keywords."""

    mbr: Rect
    object_ids: np.ndarray
    inverted_file: dict[int, np.ndarray]
    kw_bitmap: int = 0


@dataclass
class InternalNode:
    """Routing node: MBR covering all children and the OR of their keyword
    bitmaps."""

    mbr: Rect
    children: list["LeafNode | InternalNode"]
    kw_bitmap: int = 0


@dataclass(frozen=True)
class QueryStats:
    """Per-query instrumentation: nodes whose MBR/bitmap test ran, objects
    whose location was tested, and the result count."""

    nodes_accessed: int
    objects_checked: int
    results: int

    def __post_init__(self) -> None:
        if self.results > self.objects_checked:
            raise ValueError(
                f"results ({self.results}) cannot exceed objects checked "
                f"({self.objects_checked})"
            )


@dataclass
class Counters:
    """Cumulative access counters across all range queries on an index."""

    nodes_accessed: int = 0
    objects_checked: int = 0


@dataclass(frozen=True)
class RetrainConfig:
    """Everything a retrain needs to rebuild partitions: cost weights,
    recursion floors, split-search settings, packing settings, and a factory
    producing a selectivity estimator for a (possibly grown) dataset."""

    weights: CostWeights = CostWeights()
    limits: Limits = Limits()
    sgd: SgdConfig = SgdConfig()
    rl: RlConfig = RlConfig()
    seed: int = 0
    estimator_factory: Callable[[Dataset], object] = ExactCountEstimator


class _State:
    """One immutable-by-convention snapshot of the serving tree.

    Queries read ``index._state`` once and traverse that snapshot; writers
    replace the whole reference, so a background rebuild never disturbs
    readers mid-flight.
    """

    __slots__ = ("root", "ds", "extra", "insert_buffer", "workload", "depth")

    def __init__(self, root, ds: Dataset, extra: dict[int, GeoObject],
                 insert_buffer: list[GeoObject], workload: Workload | None,
                 depth: int):
        self.root = root
        self.ds = ds
        self.extra = extra
        self.insert_buffer = insert_buffer
        self.workload = workload
        self.depth = depth


class GeoWordIndex:
    """The assembled index: a root reference, the dataset it serves, the
    insert buffer, and cumulative access counters.

    Concurrency contract: range/kNN queries are read-only and may run
    concurrently; inserts and retrains exclude each other via a writer lock;
    ``swap_retrain`` builds off to the side and publishes through one atomic
    reference assignment, so in-flight queries keep reading the old tree.
    """

    def __init__(self, state: _State, *, buffer_capacity: int = 100_000,
                 retrain: RetrainConfig | None = None):
        if buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        self._state = state
        self.buffer_capacity = buffer_capacity
        self.retrain_config = retrain if retrain is not None else RetrainConfig()
        self.stats = Counters()
        self._hashed = len(state.ds.dictionary) > _HASHED_BITS
        self._write_lock = threading.RLock()
        self._build_lock = threading.Lock()
        self._gen = itertools.count(1)
        self._applied_gen = 0

    # Live-state views (all delegate to the current snapshot).
    @property
    def root(self):
        return self._state.root

    @property
    def dataset(self) -> Dataset:
        return self._state.ds

    @property
    def levels(self) -> int:
        return self._state.depth

    @property
    def insert_buffer(self) -> list[GeoObject]:
        return self._state.insert_buffer

    @property
    def workload(self) -> Workload | None:
        return self._state.workload

    def set_workload(self, w: Workload) -> None:
        """Attach the workload future retrains should extend (e.g. after
        loading an index from disk, where the workload is stored separately)."""
        self._state.workload = w

    def key_bits(self, keys: Iterable[int]) -> int:
        return _key_bits(keys, self._hashed)


# ------------------------------------------------------------------ helpers


def _kw_bit(k: int, hashed: bool) -> int:
    return 1 << (k % _HASHED_BITS) if hashed else 1 << k


def _key_bits(keys: Iterable[int], hashed: bool) -> int:
    bits = 0
    for k in keys:
        bits |= _kw_bit(int(k), hashed)
    return bits


def _union(a: Rect | None, b: Rect) -> Rect:
    if a is None:
        return b
    return Rect(min(a.xb, b.xb), min(a.yb, b.yb), max(a.xu, b.xu), max(a.yu, b.yu))


def _expand_point(r: Rect, p: GeoPoint) -> Rect:
    if r.contains(p):
        return r
    return Rect(min(r.xb, p.x), min(r.yb, p.y), max(r.xu, p.x), max(r.yu, p.y))


def _depth(node) -> int:
    if isinstance(node, LeafNode):
        return 1
    return 1 + max(_depth(ch) for ch in node.children)


def _leaf_from_cluster(c: BottomCluster, hashed: bool) -> LeafNode:
    inv = {int(k): np.asarray(v, dtype=np.int64) for k, v in c.inverted_file.items()}
    return LeafNode(
        mbr=c.mbr,
        object_ids=np.asarray(c.object_ids, dtype=np.int64),
        inverted_file=inv,
        kw_bitmap=_key_bits(inv.keys(), hashed),
    )


def _refresh(node, hashed: bool) -> tuple[Rect, int]:
    """Recompute MBRs (internal) and keyword bitmaps (all) bottom-up."""
    if isinstance(node, LeafNode):
        node.kw_bitmap = _key_bits(node.inverted_file.keys(), hashed)
        return node.mbr, node.kw_bitmap
    mbr: Rect | None = None
    bits = 0
    for ch in node.children:
        m, b = _refresh(ch, hashed)
        mbr = _union(mbr, m)
        bits |= b
    if mbr is None:
        raise ValueError("internal node has no children")
    node.mbr = mbr
    node.kw_bitmap = bits
    return mbr, bits


def _collect_leaf_paths(root) -> list[tuple[LeafNode, list[InternalNode]]]:
    """All leaves in pre-order, each with its ancestor chain (root first)."""
    out: list[tuple[LeafNode, list[InternalNode]]] = []

    def walk(node, path):
        if isinstance(node, LeafNode):
            out.append((node, path))
            return
        for ch in node.children:
            walk(ch, path + [node])

    walk(root, [])
    return out


def index_leaves(idx: GeoWordIndex) -> list[LeafNode]:
    """Leaves of the current tree in pre-order."""
    return [leaf for leaf, _ in _collect_leaf_paths(idx._state.root)]


def node_count(idx: GeoWordIndex) -> int:
    """Total nodes (leaves + internals) in the current tree."""
    count = 0
    stack = [idx._state.root]
    while stack:
        node = stack.pop()
        count += 1
        if isinstance(node, InternalNode):
            stack.extend(node.children)
    return count


def current_dataset(idx: GeoWordIndex) -> Dataset:
    """The dataset including any buffered (not yet merged) inserts; the
    ground truth that brute-force comparisons should run against."""
    st = idx._state
    if not st.extra:
        return st.ds
    return st.ds.with_objects([st.extra[i] for i in sorted(st.extra)])


def structural_hash(idx: GeoWordIndex) -> str:
    """Digest of the tree structure (node kinds, MBRs, memberships); stats
    and pending buffers are excluded."""
    import hashlib

    doc = json.dumps(_node_table(idx._state.root), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


# ----------------------------------------------------------------- assembly


def assemble_index(clusters: Sequence[BottomCluster],
                   levels: Sequence[Sequence[UpperNode]],
                   ds: Dataset, *,
                   workload: Workload | None = None,
                   buffer_capacity: int = 100_000,
                   retrain: RetrainConfig | None = None) -> GeoWordIndex:
    """Build the serving tree from bottom clusters and packed levels.

    Leaves come from the clusters; each packed level's nodes become internal
    nodes over the layer below (level 0 references cluster ids, level i+1
    references level i's node ids).  MBRs and bitmaps are computed bottom-up.
    If the top layer holds more than one node — in particular when ``levels``
    is empty — a synthetic root spans it; a single cluster with no levels
    makes that leaf the root.  Inconsistent child references (unknown ids,
    a node claimed by two parents, or a node left unreferenced) raise
    ValueError.
    """
    if not clusters:
        raise ValueError("cannot assemble an index from zero clusters")
    hashed = len(ds.dictionary) > _HASHED_BITS

    below: dict[int, LeafNode | InternalNode] = {}
    for c in clusters:
        if c.id in below:
            raise ValueError(f"duplicate cluster id {c.id}")
        below[c.id] = _leaf_from_cluster(c, hashed)

    for lvl_no, level in enumerate(levels):
        above: dict[int, LeafNode | InternalNode] = {}
        used: set[int] = set()
        for u in level:
            if u.id in above:
                raise ValueError(f"level {lvl_no}: duplicate node id {u.id}")
            if not u.child_ids:
                raise ValueError(f"level {lvl_no}: node {u.id} has no children")
            children = []
            mbr: Rect | None = None
            bits = 0
            for cid in u.child_ids:
                if cid not in below:
                    raise ValueError(
                        f"level {lvl_no}: node {u.id} references unknown child {cid}"
                    )
                if cid in used:
                    raise ValueError(
                        f"level {lvl_no}: child {cid} assigned to two parents"
                    )
                used.add(cid)
                ch = below[cid]
                children.append(ch)
                mbr = _union(mbr, ch.mbr)
                bits |= ch.kw_bitmap
            above[u.id] = InternalNode(mbr=mbr, children=children, kw_bitmap=bits)
        unreferenced = set(below) - used
        if unreferenced:
            raise ValueError(
                f"level {lvl_no}: nodes {sorted(unreferenced)} are not referenced "
                f"by any parent"
            )
        below = above

    tops = list(below.values())
    if len(tops) == 1:
        root = tops[0]
    else:
        mbr: Rect | None = None
        bits = 0
        for t in tops:
            mbr = _union(mbr, t.mbr)
            bits |= t.kw_bitmap
        root = InternalNode(mbr=mbr, children=tops, kw_bitmap=bits)

    state = _State(root, ds, {}, [], workload, _depth(root))
    return GeoWordIndex(state, buffer_capacity=buffer_capacity, retrain=retrain)


def select_hierarchy_depth(clusters: Sequence[BottomCluster],
                           levels: Sequence[Sequence[UpperNode]],
                           ds: Dataset, workload: Workload,
                           ) -> list[Sequence[UpperNode]]:
    """Pick how many packed levels to keep by measuring, not modeling.

    Each prefix of ``levels`` (including the empty one, the flat layout) is
    assembled and its mean nodes-accessed over ``workload`` measured with the
    real query path; the shortest prefix achieving the minimum wins.  The
    per-level packing objective scores a level in isolation, so a stack of
    individually reasonable levels can still test more nodes than the flat
    layout once upper MBRs accumulate dead space — this step catches that.
    """
    if not workload.queries:
        raise ValueError("cannot select a hierarchy depth against an empty "
                         "workload")
    best_mean = math.inf
    best = 0
    for depth in range(len(levels) + 1):
        idx = assemble_index(clusters, levels[:depth], ds)
        total = 0
        for q in workload.queries:
            total += query_range(idx, q)[1].nodes_accessed
        mean = total / len(workload.queries)
        if mean < best_mean:
            best_mean = mean
            best = depth
    return list(levels[:best])


# ------------------------------------------------------------ range queries


def _node_passes(node, area: Rect, kbits: int) -> bool:
    return bool(node.kw_bitmap & kbits) and node.mbr.overlaps(area)


def _leaf_candidates(leaf: LeafNode, keys: frozenset[int]) -> np.ndarray:
    """Distinct member ids posted under at least one query keyword (each will
    get exactly one location test)."""
    parts = [leaf.inverted_file[k] for k in sorted(keys) if k in leaf.inverted_file]
    if not parts:
        return np.empty(0, dtype=np.int64)
    if len(parts) == 1:
        return parts[0]
    return np.unique(np.concatenate(parts))


def _filter_in_rect(st: _State, ids: np.ndarray, area: Rect) -> np.ndarray:
    """The subset of ids whose location falls inside area; base objects are
    tested vectorized, buffered inserts via their stored locations."""
    n_base = len(st.ds)
    base = ids[ids < n_base]
    parts: list[np.ndarray] = []
    if len(base):
        xs, ys = st.ds.xs[base], st.ds.ys[base]
        inside = (xs >= area.xb) & (xs <= area.xu) & (ys >= area.yb) & (ys <= area.yu)
        parts.append(base[inside])
    extra = ids[ids >= n_base]
    if len(extra):
        hit = [int(i) for i in extra if area.contains(st.extra[int(i)].loc)]
        parts.append(np.asarray(hit, dtype=np.int64))
    if not parts:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(parts) if len(parts) > 1 else parts[0]


def query_range(idx: GeoWordIndex, q: Query) -> tuple[np.ndarray, QueryStats]:
    """Answer a range query breadth-first, counting every access.

    A child is enqueued only when its MBR overlaps ``q.area`` and its keyword
    bitmap intersects ``q.keys``; each such test counts one node access (the
    root's own test included).  At a leaf, the inverted lists of the query
    keywords are merged and each distinct candidate gets one location test,
    counted in ``objects_checked``.  Returns the sorted matching ids — always
    equal to the brute-force scan — plus the per-query stats.
    """
    st = idx._state
    kbits = _key_bits(q.keys, idx._hashed)
    nodes = 1
    checked = 0
    parts: list[np.ndarray] = []
    queue: deque = deque()
    if _node_passes(st.root, q.area, kbits):
        queue.append(st.root)
    while queue:
        node = queue.popleft()
        if isinstance(node, LeafNode):
            cand = _leaf_candidates(node, q.keys)
            checked += len(cand)
            if len(cand):
                parts.append(_filter_in_rect(st, cand, q.area))
        else:
            for ch in node.children:
                nodes += 1
                if _node_passes(ch, q.area, kbits):
                    queue.append(ch)
    if parts:
        ids = np.unique(np.concatenate(parts))
    else:
        ids = np.empty(0, dtype=np.int64)
    stats = QueryStats(nodes, checked, len(ids))
    idx.stats.nodes_accessed += nodes
    idx.stats.objects_checked += checked
    return ids, stats


# -------------------------------------------------------------- kNN queries


def _loc_of(st: _State, oid: int) -> GeoPoint:
    if oid < len(st.ds):
        return GeoPoint(float(st.ds.xs[oid]), float(st.ds.ys[oid]))
    return st.extra[oid].loc


def query_bknn(idx: GeoWordIndex, center: GeoPoint, keys: Iterable[int],
               k: int) -> list[tuple[int, float]]:
    """Boolean kNN: up to k objects containing at least one of ``keys``,
    ascending Euclidean distance from ``center``, ties broken by object id.

    Best-first search over a min-priority queue: tree nodes are keyed by the
    distance from the center to their MBR (0 inside) and expanded before any
    object at the same distance, so an object is emitted only once nothing
    nearer (or equally near with a smaller id) can still appear.  Nodes whose
    bitmap shares no query keyword are pruned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    keyset = frozenset(int(x) for x in keys)
    st = idx._state
    kbits = _key_bits(keyset, idx._hashed)
    tick = itertools.count()
    # Heap entries: (distance, kind, tiebreak, node). kind 0 = tree node,
    # kind 1 = object (tiebreak is its id, node is None).
    heap: list[tuple[float, int, int, object]] = []
    if st.root.kw_bitmap & kbits:
        heapq.heappush(heap, (st.root.mbr.mindist(center), 0, next(tick), st.root))
    out: list[tuple[int, float]] = []
    while heap and len(out) < k:
        dist, kind, tie, node = heapq.heappop(heap)
        if kind == 1:
            out.append((tie, dist))
            continue
        if isinstance(node, LeafNode):
            for oid in _leaf_candidates(node, keyset):
                oid = int(oid)
                p = _loc_of(st, oid)
                d = math.hypot(p.x - center.x, p.y - center.y)
                heapq.heappush(heap, (d, 1, oid, None))
        else:
            for ch in node.children:
                if ch.kw_bitmap & kbits:
                    heapq.heappush(heap, (ch.mbr.mindist(center), 0, next(tick), ch))
    return out


# ------------------------------------------------------------------ inserts


def insert_object(idx: GeoWordIndex, o: GeoObject) -> None:
    """Insert one object: visible to queries immediately, buffered for the
    next retrain.

    The object joins the smallest-area leaf whose MBR contains its location
    (leaves tile the objects, not the space, so a point outside every leaf
    goes to the nearest leaf and that leaf's MBR — plus its ancestors' — is
    expanded).  Ids must extend the dataset's dense 0..n-1 numbering; a
    duplicate or gapped id and unknown keyword ids are rejected.  When the
    buffer reaches capacity the affected leaves are repartitioned and the
    buffer is cleared.
    """
    with idx._write_lock:
        st = idx._state
        expected = len(st.ds) + len(st.extra)
        if o.id < expected:
            raise ValueError(f"object id {o.id} is already indexed")
        if o.id > expected:
            raise ValueError(
                f"object ids must continue densely: expected {expected}, got {o.id}"
            )
        unknown = [k for k in o.kws if k not in st.ds.words]
        if unknown:
            raise ValueError(f"object {o.id} uses unknown keyword ids {sorted(unknown)}")

        leaf_paths = _collect_leaf_paths(st.root)
        containing = [(leaf.mbr.area(), pos, leaf, path)
                      for pos, (leaf, path) in enumerate(leaf_paths)
                      if leaf.mbr.contains(o.loc)]
        if containing:
            _, _, leaf, path = min(containing, key=lambda t: (t[0], t[1]))
        else:
            _, _, leaf, path = min(
                ((leaf.mbr.mindist(o.loc), pos, leaf, path)
                 for pos, (leaf, path) in enumerate(leaf_paths)),
                key=lambda t: (t[0], t[1]),
            )
            leaf.mbr = _expand_point(leaf.mbr, o.loc)

        bits = _key_bits(o.kws, idx._hashed)
        leaf.object_ids = np.append(leaf.object_ids, np.int64(o.id))
        for kw in sorted(o.kws):
            prev = leaf.inverted_file.get(kw)
            if prev is None:
                leaf.inverted_file[kw] = np.array([o.id], dtype=np.int64)
            else:
                leaf.inverted_file[kw] = np.append(prev, np.int64(o.id))
        leaf.kw_bitmap |= bits
        for anc in path:
            anc.mbr = _expand_point(anc.mbr, o.loc)
            anc.kw_bitmap |= bits

        st.extra[o.id] = o
        st.insert_buffer.append(o)
        if len(st.insert_buffer) >= idx.buffer_capacity:
            retrain_affected(idx, None)


# ----------------------------------------------------------------- retrains


def _merged_workload(old: Workload | None, new: Workload | None) -> Workload | None:
    if new is None:
        return old
    qs = (old.queries if old is not None else ()) + tuple(new.queries)
    return Workload(tuple(Query(i, q.area, q.keys, q.tag) for i, q in enumerate(qs)))


def retrain_affected(idx: GeoWordIndex, new_queries: Workload | None = None) -> GeoWordIndex:
    """Repartition just the leaves a workload change or the buffered inserts
    touched.

    Affected leaves are those overlapping a new query's area while sharing a
    keyword with it, plus any leaf holding buffered inserts.  Buffered
    objects are first merged into the dataset; each affected leaf is then
    repartitioned in isolation — the cluster search reruns inside the leaf's
    own MBR against the updated workload — and the resulting leaves take its
    place under the original parent.  Ancestor MBRs and bitmaps are
    recomputed.  With nothing affected the tree is untouched (structural
    hash unchanged).
    """
    with idx._write_lock:
        st = idx._state
        old_n = len(st.ds)
        leaf_paths = _collect_leaf_paths(st.root)

        affected: list[tuple[LeafNode, list[InternalNode]]] = []
        seen: set[int] = set()
        if new_queries is not None:
            for leaf, path in leaf_paths:
                if id(leaf) in seen:
                    continue
                for q in new_queries.queries:
                    if leaf.mbr.overlaps(q.area) and any(
                            k in leaf.inverted_file for k in q.keys):
                        affected.append((leaf, path))
                        seen.add(id(leaf))
                        break
        if st.extra:
            for leaf, path in leaf_paths:
                if id(leaf) in seen:
                    continue
                if len(leaf.object_ids) and int(leaf.object_ids[-1]) >= old_n:
                    affected.append((leaf, path))
                    seen.add(id(leaf))

        extras = [st.extra[i] for i in sorted(st.extra)]
        ds2 = st.ds.with_objects(extras) if extras else st.ds
        w2 = _merged_workload(st.workload, new_queries)

        if w2 is None or len(w2) == 0 or not affected:
            if w2 is None or len(w2) == 0:
                log.info("retrain skipped: no workload to retrain against")
            idx._state = _State(st.root, ds2, {}, [], w2, st.depth)
            return idx

        cfg = idx.retrain_config
        est = cfg.estimator_factory(ds2)
        root = st.root
        for leaf, path in affected:
            qidx = subspace_queries(ds2, w2, range(len(w2)), leaf.mbr,
                                    leaf.object_ids)
            sub = SubSpace(leaf.mbr, leaf.object_ids, qidx)
            clusters = generate_bottom_clusters(
                ds2, w2, est, cfg.weights, cfg.limits, cfg.sgd, root=sub)
            new_leaves = [_leaf_from_cluster(c, idx._hashed) for c in clusters]
            if path:
                parent = path[-1]
                pos = next(i for i, ch in enumerate(parent.children) if ch is leaf)
                parent.children[pos:pos + 1] = new_leaves
            elif len(new_leaves) == 1:
                root = new_leaves[0]
            else:
                root = InternalNode(mbr=leaf.mbr, children=new_leaves)
        _refresh(root, idx._hashed)
        idx._state = _State(root, ds2, {}, [], w2, _depth(root))
        return idx


def _build_state(ds: Dataset, w: Workload, cfg: RetrainConfig) -> _State:
    """Full from-scratch build: partition, pack levels, assemble a tree."""
    est = cfg.estimator_factory(ds)
    clusters = generate_bottom_clusters(ds, w, est, cfg.weights, cfg.limits, cfg.sgd)
    levels = build_hierarchy(clusters, w, cfg.rl, seed=cfg.seed)
    levels = select_hierarchy_depth(clusters, levels, ds, w)
    rebuilt = assemble_index(clusters, levels, ds, workload=w)
    return rebuilt._state


def swap_retrain(idx: GeoWordIndex, new_workload: Workload,
                 budget: float | None = None) -> GeoWordIndex:
    """Rebuild the whole index on ``new_workload`` without blocking readers.

    The build runs in a background thread against a snapshot of the current
    objects (buffered inserts included); the old tree keeps serving until the
    replacement is published by a single atomic reference swap.  ``budget``
    is how many seconds to wait for completion: None waits until the build
    finishes, 0 returns immediately and the swap happens when the build does.
    A failed build leaves the old index serving.  Of overlapping calls, the
    most recent wins: an older build finishing late is discarded.
    """
    with idx._write_lock:
        ds = current_dataset(idx)
        gen = next(idx._gen)
    cfg = idx.retrain_config

    def worker() -> None:
        with idx._build_lock:  # one background build at a time
            try:
                state = _build_state(ds, new_workload, cfg)
            except Exception:
                log.warning("background rebuild failed; keeping the old layout",
                            exc_info=True)
                return
            with idx._write_lock:
                if gen > idx._applied_gen:
                    idx._applied_gen = gen
                    idx._state = state

    t = threading.Thread(target=worker, name="geoword-rebuild", daemon=True)
    t.start()
    if budget is None:
        t.join()
    elif budget > 0:
        t.join(budget)
    return idx


# ------------------------------------------------------------ serialization


def _node_table(root) -> list[dict]:
    """Pre-order node records; children are stored as table positions."""
    nodes: list[dict] = []

    def walk(node) -> int:
        rec: dict = {"mbr": [node.mbr.xb, node.mbr.yb, node.mbr.xu, node.mbr.yu]}
        pos = len(nodes)
        nodes.append(rec)
        if isinstance(node, LeafNode):
            rec["kind"] = "leaf"
            rec["object_ids"] = [int(i) for i in node.object_ids]
        else:
            rec["kind"] = "internal"
            rec["children"] = [walk(ch) for ch in node.children]
        return pos

    walk(root)
    return nodes


def serialize_index(idx: GeoWordIndex, path: str) -> None:
    """Write the index: a version/dataset header, the pre-order node table,
    and any still-buffered inserts.  Inverted files and bitmaps are derived
    data and are rebuilt on load."""
    with idx._write_lock:
        st = idx._state
        doc = {
            "header": {
                "version": INDEX_FORMAT_VERSION,
                "n_objects": len(st.ds) + len(st.extra),
                "dict_hash": st.ds.dict_hash(),
            },
            "buffer_capacity": idx.buffer_capacity,
            "pending": [
                {"id": o.id, "x": o.loc.x, "y": o.loc.y, "kws": sorted(o.kws)}
                for o in st.insert_buffer
            ],
            "nodes": _node_table(st.root),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def _rebuild_inverted(ids: np.ndarray, ds: Dataset,
                      extra: dict[int, GeoObject]) -> dict[int, np.ndarray]:
    inv: dict[int, list[int]] = {}
    n = len(ds)
    indptr, kwids = ds.kw_indptr, ds.kw_ids
    for oid in ids:  # ascending ids keep every posting list sorted
        oid = int(oid)
        kws = (kwids[indptr[oid]:indptr[oid + 1]] if oid < n
               else sorted(extra[oid].kws))
        for k in kws:
            inv.setdefault(int(k), []).append(oid)
    return {k: np.asarray(v, dtype=np.int64) for k, v in inv.items()}


def deserialize_index(path: str, ds: Dataset,
                      workload: Workload | None = None,
                      retrain: RetrainConfig | None = None) -> GeoWordIndex:
    """Load an index written by :func:`serialize_index` against the same
    dataset.  Version or dataset mismatches and malformed content raise
    ValueError; the optional workload and retrain config re-attach the
    retraining context."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: corrupt index file: {e}") from None

    try:
        header = doc["header"]
        version = header["version"]
        n_objects = int(header["n_objects"])
        dict_hash = header["dict_hash"]
        capacity = int(doc["buffer_capacity"])
        pending = doc["pending"]
        table = doc["nodes"]
    except (KeyError, TypeError) as e:
        raise ValueError(f"{path}: corrupt index file: missing {e}") from None
    if version != INDEX_FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported index format version {version!r} "
            f"(expected {INDEX_FORMAT_VERSION})"
        )
    if dict_hash != ds.dict_hash():
        raise ValueError(f"{path}: index was built against a different dataset")

    extra: dict[int, GeoObject] = {}
    buffer: list[GeoObject] = []
    try:
        for rec in pending:
            o = GeoObject(int(rec["id"]), GeoPoint(float(rec["x"]), float(rec["y"])),
                          frozenset(int(k) for k in rec["kws"]))
            extra[o.id] = o
            buffer.append(o)
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"{path}: corrupt pending-insert record: {e}") from None
    if len(ds) + len(extra) != n_objects:
        raise ValueError(
            f"{path}: header says {n_objects} objects, dataset+pending has "
            f"{len(ds) + len(extra)}"
        )

    building: set[int] = set()

    def build(pos: int):
        if not isinstance(pos, int) or not 0 <= pos < len(table):
            raise ValueError(f"{path}: node reference {pos!r} out of range")
        if pos in building:
            raise ValueError(f"{path}: node {pos} referenced twice")
        building.add(pos)
        rec = table[pos]
        try:
            mbr = Rect(*[float(v) for v in rec["mbr"]])
            kind = rec["kind"]
            if kind == "leaf":
                ids = np.asarray([int(i) for i in rec["object_ids"]], dtype=np.int64)
                return LeafNode(mbr, ids, _rebuild_inverted(ids, ds, extra))
            if kind == "internal":
                if not rec["children"]:
                    raise ValueError("internal node with no children")
                return InternalNode(mbr, [build(p) for p in rec["children"]])
        except (KeyError, TypeError) as e:
            raise ValueError(f"{path}: corrupt node record {pos}: {e}") from None
        raise ValueError(f"{path}: corrupt node record {pos}: unknown kind {kind!r}")

    if not table:
        raise ValueError(f"{path}: corrupt index file: empty node table")
    root = build(0)
    if len(building) != len(table):
        raise ValueError(f"{path}: {len(table) - len(building)} unreachable nodes")

    member_ids = np.concatenate([leaf.object_ids
                                 for leaf, _ in _collect_leaf_paths(root)])
    if len(member_ids) != n_objects or len(np.unique(member_ids)) != n_objects:
        raise ValueError(f"{path}: leaves do not partition the objects")

    hashed = len(ds.dictionary) > _HASHED_BITS
    _refresh(root, hashed)
    state = _State(root, ds, extra, buffer, workload, _depth(root))
    return GeoWordIndex(state, buffer_capacity=capacity, retrain=retrain)
