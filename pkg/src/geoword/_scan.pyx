# Compiled scan kernels: rectangle containment plus keyword-set membership
# over a CSR layout of per-object sorted keyword ids.  Mirrors _scan_py.py;
# both backends must stay behaviorally identical (tests enforce this).

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline bint _has_any(const int* kw, Py_ssize_t nk, const int* qk, Py_ssize_t nq) noexcept nogil:
    # two-pointer intersection test over sorted id arrays
    cdef Py_ssize_t i = 0, j = 0
    while i < nk and j < nq:
        if kw[i] == qk[j]:
            return True
        elif kw[i] < qk[j]:
            i += 1
        else:
            j += 1
    return False


def match_mask(const long long[::1] indptr, const int[::1] kwids,
               const int[::1] qkeys, ids=None):
    """uint8 mask: object shares >=1 keyword with qkeys.

    With ids=None the mask covers all objects; otherwise it is aligned with
    the given int64 id array.
    """
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t nq = qkeys.shape[0]
    cdef const int* qk = &qkeys[0] if nq > 0 else NULL
    cdef const long long[::1] idv
    cdef Py_ssize_t m, i
    cdef long long o
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] out
    if ids is None:
        out = np.zeros(n, dtype=np.uint8)
        if nq == 0:
            return out
        with nogil:
            for i in range(n):
                if _has_any(&kwids[indptr[i]], indptr[i + 1] - indptr[i], qk, nq):
                    out[i] = 1
        return out
    idv = ids
    m = idv.shape[0]
    out = np.zeros(m, dtype=np.uint8)
    if nq == 0 or m == 0:
        return out
    with nogil:
        for i in range(m):
            o = idv[i]
            if _has_any(&kwids[indptr[o]], indptr[o + 1] - indptr[o], qk, nq):
                out[i] = 1
    return out


def query_ids(const double[::1] xs, const double[::1] ys,
              const long long[::1] indptr, const int[::1] kwids,
              const int[::1] qkeys,
              double xb, double yb, double xu, double yu):
    """Sorted ids of objects inside the closed rectangle sharing a keyword."""
    cdef Py_ssize_t n = xs.shape[0]
    cdef Py_ssize_t nq = qkeys.shape[0]
    cdef const int* qk = &qkeys[0] if nq > 0 else NULL
    cdef cnp.ndarray[cnp.int64_t, ndim=1] buf = np.empty(n, dtype=np.int64)
    cdef long long[::1] bv = buf
    cdef Py_ssize_t i, cnt = 0
    if nq > 0:
        with nogil:
            for i in range(n):
                if xb <= xs[i] <= xu and yb <= ys[i] <= yu:
                    if _has_any(&kwids[indptr[i]], indptr[i + 1] - indptr[i], qk, nq):
                        bv[cnt] = i
                        cnt += 1
    return buf[:cnt].copy()


def count_matching(const double[::1] xs, const double[::1] ys,
                   const long long[::1] indptr, const int[::1] kwids,
                   const int[::1] qkeys,
                   double xb, double yb, double xu, double yu,
                   ids=None):
    """Count of rectangle-contained, keyword-sharing objects (optionally over
    an id subset)."""
    cdef Py_ssize_t nq = qkeys.shape[0]
    cdef const int* qk = &qkeys[0] if nq > 0 else NULL
    cdef const long long[::1] idv
    cdef Py_ssize_t n, i, cnt = 0
    cdef long long o
    if nq == 0:
        return 0
    if ids is None:
        n = xs.shape[0]
        with nogil:
            for i in range(n):
                if xb <= xs[i] <= xu and yb <= ys[i] <= yu:
                    if _has_any(&kwids[indptr[i]], indptr[i + 1] - indptr[i], qk, nq):
                        cnt += 1
        return cnt
    idv = ids
    n = idv.shape[0]
    with nogil:
        for i in range(n):
            o = idv[i]
            if xb <= xs[o] <= xu and yb <= ys[o] <= yu:
                if _has_any(&kwids[indptr[o]], indptr[o + 1] - indptr[o], qk, nq):
                    cnt += 1
    return cnt


def filter_rect(const double[::1] xs, const double[::1] ys,
                const long long[::1] ids,
                double xb, double yb, double xu, double yu):
    """Subset of ids whose locations fall inside the closed rectangle."""
    cdef Py_ssize_t m = ids.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] buf = np.empty(m, dtype=np.int64)
    cdef long long[::1] bv = buf
    cdef Py_ssize_t i, cnt = 0
    cdef long long o
    with nogil:
        for i in range(m):
            o = ids[i]
            if xb <= xs[o] <= xu and yb <= ys[o] <= yu:
                bv[cnt] = o
                cnt += 1
    return buf[:cnt].copy()
