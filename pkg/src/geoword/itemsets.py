"""Frequent keyword co-occurrence mining (FP-growth).

Co-occurring query keywords break the independence assumption behind
product-of-marginals selectivity, so the estimator keeps a table of frequent
itemsets to correct with.  Supports are absolute object counts; the relative
min_support threshold is applied against the dataset size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import Dataset


class _Node:
    __slots__ = ("item", "count", "parent", "children")

    def __init__(self, item: int, parent: "_Node | None"):
        self.item = item
        self.count = 0
        self.parent = parent
        self.children: dict[int, _Node] = {}


def _build_tree(transactions: Iterable[tuple[Sequence[int], int]], order: dict[int, int]):
    """FP-tree plus per-item node lists; items already filtered/ordered."""
    root = _Node(-1, None)
    header: dict[int, list[_Node]] = {}
    for items, weight in transactions:
        node = root
        for it in items:
            nxt = node.children.get(it)
            if nxt is None:
                nxt = _Node(it, node)
                node.children[it] = nxt
                header.setdefault(it, []).append(nxt)
            nxt.count += weight
            node = nxt
    return root, header


def _mine(header: dict[int, list[_Node]], suffix: tuple[int, ...], min_count: int,
          max_size: int, out: dict[tuple[int, ...], int]) -> None:
    # ascending support so conditional trees stay small
    items = sorted(header, key=lambda it: (sum(n.count for n in header[it]), it))
    for it in items:
        support = sum(n.count for n in header[it])
        if support < min_count:
            continue
        found = tuple(sorted(suffix + (it,)))
        if len(found) >= 2:
            out[found] = support
        if len(found) >= max_size:
            continue
        # conditional pattern base: prefix paths of every node holding `it`
        base: list[tuple[list[int], int]] = []
        counts: dict[int, int] = {}
        for node in header[it]:
            path = []
            p = node.parent
            while p is not None and p.item != -1:
                path.append(p.item)
                p = p.parent
            if path:
                path.reverse()
                base.append((path, node.count))
                for x in path:
                    counts[x] = counts.get(x, 0) + node.count
        keep = {x for x, c in counts.items() if c >= min_count}
        if not keep:
            continue
        cond_order = {x: i for i, x in enumerate(sorted(keep, key=lambda x: (-counts[x], x)))}
        cond: list[tuple[list[int], int]] = []
        for path, w in base:
            filtered = sorted((x for x in path if x in keep), key=cond_order.get)
            if filtered:
                cond.append((filtered, w))
        _, cond_header = _build_tree(cond, cond_order)
        _mine(cond_header, suffix + (it,), min_count, max_size, out)


@dataclass(frozen=True)
class ItemsetTable:
    """Mined itemsets (size >= 2) with absolute supports."""

    itemsets: dict[tuple[int, ...], int]
    min_support: float
    max_size: int
    n_objects: int
    _by_size: dict[int, list[tuple[int, ...]]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        by_size: dict[int, list[tuple[int, ...]]] = {}
        for s in sorted(self.itemsets):
            by_size.setdefault(len(s), []).append(s)
        object.__setattr__(self, "_by_size", by_size)

    def __len__(self) -> int:
        return len(self.itemsets)

    def subsets_of(self, keys: frozenset[int]) -> list[tuple[int, ...]]:
        """Mined itemsets fully contained in `keys`, smallest first."""
        found = []
        for size in sorted(self._by_size):
            for s in self._by_size[size]:
                if all(k in keys for k in s):
                    found.append(s)
        return found

    def to_dict(self) -> dict:
        return {
            "min_support": self.min_support,
            "max_size": self.max_size,
            "n_objects": self.n_objects,
            "itemsets": [{"keys": list(s), "count": c} for s, c in sorted(self.itemsets.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ItemsetTable":
        sets = {tuple(rec["keys"]): int(rec["count"]) for rec in d["itemsets"]}
        return cls(sets, float(d["min_support"]), int(d["max_size"]), int(d["n_objects"]))


def mine_frequent_itemsets(ds: Dataset, min_support: float = 1e-5, max_size: int = 3) -> ItemsetTable:
    """All keyword itemsets of size 2..max_size with support >= min_support.

    Output is deterministic (canonically sorted keys).
    """
    if not 0.0 < min_support <= 1.0:
        raise ValueError("min_support must be in (0, 1]")
    n = len(ds)
    out: dict[tuple[int, ...], int] = {}
    if max_size < 2:
        return ItemsetTable(out, min_support, max_size, n)
    min_count = max(1, math.ceil(min_support * n - 1e-9))

    frequent = {k for k, c in ds.freq.items() if c >= min_count}
    order = {k: i for i, k in enumerate(sorted(frequent, key=lambda k: (-ds.freq[k], k)))}
    tx = []
    for o in ds.objects:
        items = sorted((k for k in o.kws if k in frequent), key=order.get)
        if items:
            tx.append((items, 1))
    _, header = _build_tree(tx, order)
    _mine(header, (), min_count, max_size, out)
    return ItemsetTable(out, min_support, max_size, n)
