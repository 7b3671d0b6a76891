"""Core types and dataset/workload plumbing.

Objects are points with keyword sets; queries are axis-aligned rectangles
with keyword sets.  A query matches every object whose location falls inside
the rectangle (closed on all sides) and whose keyword set shares at least one
keyword with the query.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from . import scan

LOW_MAX_RATIO = 1e-6
HIGH_MIN_RATIO = 1e-4


class FrequencyClass(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class Distribution(str, Enum):
    UNI = "UNI"
    LAP = "LAP"
    GAU = "GAU"
    MIX = "MIX"


@dataclass(frozen=True, slots=True)
class GeoPoint:
    x: float
    y: float


@dataclass(frozen=True, slots=True)
class GeoObject:
    """A geo-textual object: point location plus a non-empty keyword-id set."""

    id: int
    loc: GeoPoint
    kws: frozenset[int]

    def __post_init__(self) -> None:
        if not self.kws:
            raise ValueError(f"object {self.id} has an empty keyword set")


@dataclass(frozen=True, slots=True)
class Rect:
    """Axis-aligned rectangle, closed on all four sides."""

    xb: float
    yb: float
    xu: float
    yu: float

    def __post_init__(self) -> None:
        if not (self.xb <= self.xu and self.yb <= self.yu):
            raise ValueError(f"degenerate rectangle bounds: {self}")

    def contains(self, p: GeoPoint) -> bool:
        return self.xb <= p.x <= self.xu and self.yb <= p.y <= self.yu

    def overlaps(self, other: "Rect") -> bool:
        return (
            self.xb <= other.xu
            and other.xb <= self.xu
            and self.yb <= other.yu
            and other.yb <= self.yu
        )

    def area(self) -> float:
        return (self.xu - self.xb) * (self.yu - self.yb)

    def intersect(self, other: "Rect") -> "Rect | None":
        xb, xu = max(self.xb, other.xb), min(self.xu, other.xu)
        yb, yu = max(self.yb, other.yb), min(self.yu, other.yu)
        if xb > xu or yb > yu:
            return None
        return Rect(xb, yb, xu, yu)

    def mindist(self, p: GeoPoint) -> float:
        """Euclidean distance from a point to the rectangle (0 if inside)."""
        dx = max(self.xb - p.x, 0.0, p.x - self.xu)
        dy = max(self.yb - p.y, 0.0, p.y - self.yu)
        return math.hypot(dx, dy)


@dataclass(frozen=True, slots=True)
class Query:
    """Range query: region plus keyword-id set; tag records the generator
    distribution for stratification and is otherwise inert."""

    id: int
    area: Rect
    keys: frozenset[int]
    tag: str | None = None

    def __post_init__(self) -> None:
        if not self.keys:
            raise ValueError(f"query {self.id} has an empty keyword set")

    def key_array(self) -> np.ndarray:
        return np.array(sorted(self.keys), dtype=np.int32)


class Dataset:
    """Immutable object collection with a keyword dictionary.

    Alongside the object records the constructor materializes a columnar view
    (coordinate arrays plus a CSR layout of per-object sorted keyword ids)
    that the scan kernels operate on.
    """

    def __init__(self, objects: Sequence[GeoObject], dictionary: dict[str, int]):
        if not objects:
            raise ValueError("dataset must contain at least one object")
        self.objects: list[GeoObject] = list(objects)
        self.dictionary: dict[str, int] = dict(dictionary)
        self.words: dict[int, str] = {i: w for w, i in self.dictionary.items()}
        if len(self.words) != len(self.dictionary):
            raise ValueError("keyword dictionary is not a bijection")

        n = len(self.objects)
        self.xs = np.empty(n, dtype=np.float64)
        self.ys = np.empty(n, dtype=np.float64)
        counts = np.empty(n, dtype=np.int64)
        self.freq: dict[int, int] = {}
        for i, o in enumerate(self.objects):
            if o.id != i:
                raise ValueError(f"object ids must be 0..n-1 in order, got {o.id} at {i}")
            self.xs[i] = o.loc.x
            self.ys[i] = o.loc.y
            counts[i] = len(o.kws)
            for k in o.kws:
                if k not in self.words:
                    raise ValueError(f"object {o.id} uses unknown keyword id {k}")
                self.freq[k] = self.freq.get(k, 0) + 1
        self.kw_indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=self.kw_indptr[1:])
        self.kw_ids = np.empty(int(self.kw_indptr[-1]), dtype=np.int32)
        for i, o in enumerate(self.objects):
            self.kw_ids[self.kw_indptr[i] : self.kw_indptr[i + 1]] = sorted(o.kws)
        self.space = Rect(
            float(self.xs.min()), float(self.ys.min()),
            float(self.xs.max()), float(self.ys.max()),
        )
        self._postings: dict[int, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.objects)

    def postings(self) -> dict[int, np.ndarray]:
        """Keyword id -> sorted array of object ids containing it (cached)."""
        if self._postings is None:
            owner = np.repeat(np.arange(len(self), dtype=np.int64), np.diff(self.kw_indptr))
            order = np.argsort(self.kw_ids, kind="stable")
            sorted_kws = self.kw_ids[order]
            cuts = np.flatnonzero(np.diff(sorted_kws)) + 1
            groups = np.split(owner[order], cuts)
            starts = np.concatenate(([0], cuts))
            self._postings = {
                int(sorted_kws[s]): np.sort(g) for s, g in zip(starts, groups)
            }
        return self._postings

    def keyword_ids(self) -> list[int]:
        return sorted(self.words)

    def with_objects(self, extra: Iterable[GeoObject]) -> "Dataset":
        """New dataset with extra objects appended (ids must continue 0..n-1)."""
        return Dataset(self.objects + list(extra), self.dictionary)

    def dict_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for i in sorted(self.words):
            h.update(f"{i}:{self.words[i]}\n".encode())
        return h.hexdigest()


@dataclass(frozen=True, slots=True)
class WorkloadSpec:
    count: int
    distribution: Distribution = Distribution.UNI
    region_fraction: float = 0.001
    num_keywords: int = 3
    mix_ratio: float = 0.5
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("workload count must be >= 1")
        if not 0.0 < self.region_fraction <= 1.0:
            raise ValueError("region_fraction must be in (0, 1]")
        if self.num_keywords < 1:
            raise ValueError("num_keywords must be >= 1")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must be in [0, 1]")


@dataclass(frozen=True)
class Workload:
    queries: tuple[Query, ...]

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)


def keyword_frequency_class(ds: Dataset, kw: int) -> FrequencyClass:
    """Low/medium/high occurrence class of a keyword.

    The ratio freq/n is compared against 1e-6 and 1e-4; both boundary values
    land in the outer classes (<=1e-6 low, >=1e-4 high).
    """
    ratio = ds.freq.get(kw, 0) / len(ds)
    if ratio <= LOW_MAX_RATIO:
        return FrequencyClass.LOW
    if ratio >= HIGH_MIN_RATIO:
        return FrequencyClass.HIGH
    return FrequencyClass.MEDIUM


def load_dataset(path: str, fmt: str = "csv") -> Dataset:
    """Parse a CSV (id,x,y,space-separated keywords) or JSONL dataset file.

    Object ids are assigned 0..n-1 in file order; keyword ids in first-seen
    order.  Malformed records raise ValueError naming the line number.
    """
    dictionary: dict[str, int] = {}
    objects: list[GeoObject] = []

    def intern(words: list[str], lineno: int) -> frozenset[int]:
        if not words:
            raise ValueError(f"{path}:{lineno}: record has no keywords")
        ids = set()
        for w in words:
            if w not in dictionary:
                dictionary[w] = len(dictionary)
            ids.add(dictionary[w])
        return frozenset(ids)

    with open(path, "r", encoding="utf-8") as fh:
        if fmt == "csv":
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 4:
                    raise ValueError(
                        f"{path}:{lineno}: expected 4 CSV fields (id,x,y,keywords), got {len(parts)}"
                    )
                try:
                    x, y = float(parts[1]), float(parts[2])
                except ValueError as e:
                    raise ValueError(f"{path}:{lineno}: bad coordinate: {e}") from None
                kws = intern(parts[3].split(), lineno)
                objects.append(GeoObject(len(objects), GeoPoint(x, y), kws))
        elif fmt == "jsonl":
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    x, y = float(rec["x"]), float(rec["y"])
                    words = list(rec["kws"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise ValueError(f"{path}:{lineno}: bad JSONL record: {e}") from None
                kws = intern([str(w) for w in words], lineno)
                objects.append(GeoObject(len(objects), GeoPoint(x, y), kws))
        else:
            raise ValueError(f"unknown dataset format: {fmt!r}")

    if not objects:
        raise ValueError(f"{path}: dataset file contains no records")
    return Dataset(objects, dictionary)


def save_dataset(ds: Dataset, path: str) -> None:
    """Write the canonical JSONL form (keys x, y, kws)."""
    with open(path, "w", encoding="utf-8") as fh:
        for o in ds.objects:
            rec = {"x": o.loc.x, "y": o.loc.y, "kws": sorted(ds.words[k] for k in o.kws)}
            fh.write(json.dumps(rec) + "\n")


def query_bruteforce(ds: Dataset, q: Query) -> np.ndarray:
    """Exact linear-scan answer: sorted ids of objects inside q.area sharing
    at least one keyword with q.  This is the correctness oracle every index
    is compared against."""
    r = q.area
    return scan.query_ids(
        ds.xs, ds.ys, ds.kw_indptr, ds.kw_ids, q.key_array(),
        r.xb, r.yb, r.xu, r.yu,
    )


def _sample_center_indices(spec: WorkloadSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    """Center-object index per query plus the distribution tag actually used."""

    def one(dist: Distribution) -> int:
        if dist is Distribution.UNI:
            return int(rng.integers(0, n))
        if dist is Distribution.LAP:
            while True:
                v = rng.laplace(n / 2.0, n / 10.0)
                if 0.0 <= v < n:
                    return int(v)
        if dist is Distribution.GAU:
            while True:
                v = rng.normal(n / 2.0, 100.0)
                if 0.0 <= v < n:
                    return int(v)
        raise ValueError(f"unsupported distribution {dist}")

    idx = np.empty(spec.count, dtype=np.int64)
    tags: list[str] = []
    for i in range(spec.count):
        dist = spec.distribution
        if dist is Distribution.MIX:
            dist = Distribution.UNI if rng.random() < spec.mix_ratio else Distribution.LAP
        idx[i] = one(dist)
        tags.append(dist.value)
    return idx, tags


def generate_workload(ds: Dataset, spec: WorkloadSpec) -> Workload:
    """Synthesize a query workload around sampled center objects.

    Center objects are drawn over the object-index axis after sorting objects
    by (x, y), so index-space skew (LAP/GAU) concentrates spatially.  Each
    query is a square of region_fraction of the space area centered at the
    object (clipped to the space, center kept) and carries num_keywords keys
    drawn from the center object first, topped up uniformly from the
    dictionary.
    """
    n = len(ds)
    all_kws = np.array(sorted(ds.words), dtype=np.int64)
    if spec.num_keywords > len(all_kws):
        raise ValueError(
            f"num_keywords={spec.num_keywords} exceeds dictionary size {len(all_kws)}"
        )
    rng = np.random.default_rng(spec.rng_seed)
    order = np.lexsort((ds.ys, ds.xs))
    centers, tags = _sample_center_indices(spec, n, rng)

    side = math.sqrt(spec.region_fraction * ds.space.area())
    half = side / 2.0
    sp = ds.space
    queries: list[Query] = []
    for qid in range(spec.count):
        o = ds.objects[int(order[centers[qid]])]
        cx, cy = o.loc.x, o.loc.y
        rect = Rect(
            max(cx - half, sp.xb), max(cy - half, sp.yb),
            min(cx + half, sp.xu), min(cy + half, sp.yu),
        )
        own = np.array(sorted(o.kws), dtype=np.int64)
        if len(own) >= spec.num_keywords:
            keys = rng.choice(own, size=spec.num_keywords, replace=False)
        else:
            pool = np.setdiff1d(all_kws, own, assume_unique=True)
            extra = rng.choice(pool, size=spec.num_keywords - len(own), replace=False)
            keys = np.concatenate([own, extra])
        queries.append(Query(qid, rect, frozenset(int(k) for k in keys), tag=tags[qid]))
    return Workload(tuple(queries))


def default_strata_key(q: Query) -> tuple:
    return (q.tag, len(q.keys))


def stratified_sample(
    w: Workload,
    ratio: float,
    strata_key: Callable[[Query], object] | None = None,
    seed: int = 0,
) -> Workload:
    """Downsample a workload stratum by stratum.

    Every non-empty stratum contributes round(ratio * size) queries (at least
    one when ratio > 0); the result preserves the original workload order.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("sampling ratio must be in (0, 1]")
    key = strata_key or default_strata_key
    strata: dict[object, list[int]] = {}
    for pos, q in enumerate(w.queries):
        strata.setdefault(key(q), []).append(pos)

    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for k in sorted(strata, key=repr):
        members = strata[k]
        quota = int(ratio * len(members) + 0.5)
        quota = max(1, min(quota, len(members)))
        if quota >= len(members):
            chosen.extend(members)
        else:
            chosen.extend(rng.choice(members, size=quota, replace=False).tolist())
    chosen.sort()
    return Workload(tuple(w.queries[i] for i in chosen))


def save_workload(w: Workload, ds: Dataset, path: str) -> None:
    """JSON array of {id, xb, yb, xu, yu, keys:[string]}."""
    out = []
    for q in w.queries:
        r = q.area
        rec = {
            "id": q.id,
            "xb": r.xb, "yb": r.yb, "xu": r.xu, "yu": r.yu,
            "keys": sorted(ds.words[k] for k in q.keys),
        }
        if q.tag is not None:
            rec["tag"] = q.tag
        out.append(rec)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1)


def load_workload(path: str, ds: Dataset) -> Workload:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError(f"{path}: workload file must hold a JSON array")
    queries = []
    for i, rec in enumerate(raw):
        try:
            rect = Rect(float(rec["xb"]), float(rec["yb"]), float(rec["xu"]), float(rec["yu"]))
            words = rec["keys"]
            keys = frozenset(ds.dictionary[w] for w in words)
        except KeyError as e:
            raise ValueError(f"{path}: query #{i}: missing field or unknown keyword {e}") from None
        queries.append(Query(int(rec["id"]), rect, keys, tag=rec.get("tag")))
    return Workload(tuple(queries))
