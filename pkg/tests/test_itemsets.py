import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoword.core import Dataset, GeoObject, GeoPoint
from geoword.itemsets import ItemsetTable, mine_frequent_itemsets
from conftest import build_dataset


def exhaustive(ds: Dataset, min_support: float, max_size: int) -> dict[tuple, int]:
    """Count every keyword combination by brute force."""
    min_count = max(1, math.ceil(min_support * len(ds) - 1e-9))
    kws = sorted(ds.freq)
    out = {}
    for size in range(2, max_size + 1):
        for combo in itertools.combinations(kws, size):
            need = set(combo)
            support = sum(1 for o in ds.objects if need <= o.kws)
            if support >= min_count:
                out[combo] = support
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_matches_exhaustive_enumeration(seed, max_size):
    rng = np.random.default_rng(seed)
    ds = build_dataset(int(rng.integers(5, 200)), int(rng.integers(2, 12)), seed=seed)
    min_support = float(rng.choice([1e-5, 0.02, 0.1]))
    table = mine_frequent_itemsets(ds, min_support, max_size)
    assert dict(table.itemsets) == exhaustive(ds, min_support, max_size)


def test_support_threshold_boundary():
    # 10 objects; pair {0,1} in exactly 3 of them
    objs = []
    for i in range(10):
        kws = {0, 1} if i < 3 else ({0} if i % 2 == 0 else {1})
        objs.append(GeoObject(i, GeoPoint(float(i), 0.0), frozenset(kws)))
    ds = Dataset(objs, {"a": 0, "b": 1})
    assert mine_frequent_itemsets(ds, 0.3, 2).itemsets == {(0, 1): 3}  # ceil(3.0)=3
    assert mine_frequent_itemsets(ds, 0.31, 2).itemsets == {}          # needs 4


def test_max_size_truncates():
    objs = [GeoObject(i, GeoPoint(float(i), 0.0), frozenset({0, 1, 2})) for i in range(5)]
    ds = Dataset(objs, {"a": 0, "b": 1, "c": 2})
    t2 = mine_frequent_itemsets(ds, 0.5, 2)
    assert set(t2.itemsets) == {(0, 1), (0, 2), (1, 2)}
    t3 = mine_frequent_itemsets(ds, 0.5, 3)
    assert (0, 1, 2) in t3.itemsets and t3.itemsets[(0, 1, 2)] == 5


def test_subsets_of_orders_smallest_first():
    table = ItemsetTable(
        itemsets={(0, 1): 5, (1, 2): 4, (0, 1, 2): 3, (3, 4): 2},
        min_support=0.01, max_size=3, n_objects=100,
    )
    got = table.subsets_of(frozenset({0, 1, 2}))
    assert got == [(0, 1), (1, 2), (0, 1, 2)]
    assert table.subsets_of(frozenset({0, 1})) == [(0, 1)]
    assert table.subsets_of(frozenset({5, 6})) == []


def test_roundtrip():
    ds = build_dataset(150, 8, seed=42)
    table = mine_frequent_itemsets(ds, 0.01, 3)
    back = ItemsetTable.from_dict(table.to_dict())
    assert back.itemsets == table.itemsets
    assert (back.min_support, back.max_size, back.n_objects) == (
        table.min_support, table.max_size, table.n_objects)


def test_itemset_keys_are_sorted_tuples():
    ds = build_dataset(100, 6, seed=7)
    table = mine_frequent_itemsets(ds, 1e-5, 3)
    assert len(table) == len(table.itemsets)
    for s in table.itemsets:
        assert list(s) == sorted(s)
        assert 2 <= len(s) <= 3
