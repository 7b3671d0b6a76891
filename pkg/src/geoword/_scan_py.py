"""Numpy fallback for the compiled scan kernels.

Same contracts as _scan.pyx; used when the extension is unavailable or when
GEOWORD_PURE is set.  Objects are assumed to have non-empty keyword rows
(dataset invariant), which keeps the reduceat trick valid.
"""

from __future__ import annotations

import numpy as np


def match_mask(indptr: np.ndarray, kwids: np.ndarray, qkeys: np.ndarray,
               ids: np.ndarray | None = None) -> np.ndarray:
    n = len(indptr) - 1
    if len(qkeys) == 0 or len(kwids) == 0:
        full = np.zeros(n, dtype=np.uint8)
    else:
        member = np.isin(kwids, qkeys)
        hits = np.add.reduceat(member, indptr[:-1])
        full = (hits > 0).astype(np.uint8)
    if ids is None:
        return full
    return full[ids]


def _rect_mask(xs, ys, xb, yb, xu, yu):
    return (xs >= xb) & (xs <= xu) & (ys >= yb) & (ys <= yu)


def query_ids(xs, ys, indptr, kwids, qkeys, xb, yb, xu, yu) -> np.ndarray:
    inside = _rect_mask(xs, ys, xb, yb, xu, yu)
    kw = match_mask(indptr, kwids, qkeys).astype(bool)
    return np.flatnonzero(inside & kw).astype(np.int64)


def count_matching(xs, ys, indptr, kwids, qkeys, xb, yb, xu, yu,
                   ids: np.ndarray | None = None) -> int:
    if ids is None:
        inside = _rect_mask(xs, ys, xb, yb, xu, yu)
        kw = match_mask(indptr, kwids, qkeys).astype(bool)
        return int(np.count_nonzero(inside & kw))
    if len(ids) == 0:
        return 0
    inside = _rect_mask(xs[ids], ys[ids], xb, yb, xu, yu)
    kw = match_mask(indptr, kwids, qkeys, ids).astype(bool)
    return int(np.count_nonzero(inside & kw))


def filter_rect(xs, ys, ids, xb, yb, xu, yu) -> np.ndarray:
    if len(ids) == 0:
        return np.asarray(ids, dtype=np.int64)
    keep = _rect_mask(xs[ids], ys[ids], xb, yb, xu, yu)
    return np.asarray(ids, dtype=np.int64)[keep]
