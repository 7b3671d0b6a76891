import numpy as np
import pytest

from geoword.core import Dataset, GeoObject, GeoPoint


def build_dataset(n: int, n_kws: int, seed: int = 0, cluster: bool = False) -> Dataset:
    """Random dataset: uniform coordinates, 1-3 keywords per object."""
    rng = np.random.default_rng(seed)
    dictionary = {f"w{i}": i for i in range(n_kws)}
    objs = []
    for i in range(n):
        if cluster and rng.random() < 0.5:
            x, y = rng.normal(30.0, 5.0), rng.normal(70.0, 5.0)
        else:
            x, y = rng.random() * 100.0, rng.random() * 100.0
        k = int(rng.integers(1, min(3, n_kws) + 1))
        kws = frozenset(int(v) for v in rng.choice(n_kws, size=k, replace=False))
        objs.append(GeoObject(i, GeoPoint(float(x), float(y)), kws))
    return Dataset(objs, dictionary)


@pytest.fixture
def tiny_ds() -> Dataset:
    """Eight objects on a 10x10 grid with hand-checkable keyword placement.

    ids 0-3 carry 'red' in the left half (x <= 4), ids 4-7 'blue' on the
    right; ids 0 and 4 also carry 'gold'.
    """
    dictionary = {"red": 0, "blue": 1, "gold": 2}
    locs = [(1, 1), (2, 8), (3, 4), (4, 6), (6, 2), (7, 9), (8, 5), (9, 7)]
    objs = []
    for i, (x, y) in enumerate(locs):
        kws = {0} if i < 4 else {1}
        if i in (0, 4):
            kws.add(2)
        objs.append(GeoObject(i, GeoPoint(float(x), float(y)), frozenset(kws)))
    return Dataset(objs, dictionary)


@pytest.fixture(scope="session", autouse=True)
def _torch_single_thread():
    torch = pytest.importorskip("torch")
    torch.set_num_threads(1)
