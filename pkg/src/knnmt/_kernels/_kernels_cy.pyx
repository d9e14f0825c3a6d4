# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled search kernels: fused distance computation + top-k selection.

Distances are accumulated in float64 regardless of key dtype, results sorted
ascending with ties broken by lower entry id. Unlike the NumPy fallback these
never materialize a (Q x N) scratch matrix.
"""

import numpy as np

BACKEND = "compiled"

ctypedef fused real_t:
    float
    double


cdef inline double _row_sq(const real_t* q, const real_t* key, Py_ssize_t d) noexcept nogil:
    cdef double acc = 0.0
    cdef double diff
    cdef Py_ssize_t j
    for j in range(d):
        diff = (<double> q[j]) - (<double> key[j])
        acc += diff * diff
    return acc


cdef inline void _insert(double* d2buf, long long* idbuf, Py_ssize_t filled,
                         double d2, long long idx) noexcept nogil:
    # insertion keeping (d2, id) ascending; equal d2 keeps earlier (lower) id first
    cdef Py_ssize_t pos = filled
    while pos > 0 and (d2buf[pos - 1] > d2 or (d2buf[pos - 1] == d2 and idbuf[pos - 1] > idx)):
        d2buf[pos] = d2buf[pos - 1]
        idbuf[pos] = idbuf[pos - 1]
        pos -= 1
    d2buf[pos] = d2
    idbuf[pos] = idx


def _topk_l2_impl(real_t[:, ::1] queries, real_t[:, ::1] keys, Py_ssize_t k,
                  double[:, ::1] out_d2, long long[:, ::1] out_ids):
    cdef Py_ssize_t q_n = queries.shape[0]
    cdef Py_ssize_t n = keys.shape[0]
    cdef Py_ssize_t d = queries.shape[1]
    cdef Py_ssize_t qi, i, filled
    cdef double d2, worst
    with nogil:
        for qi in range(q_n):
            filled = 0
            worst = 0.0
            for i in range(n):
                d2 = _row_sq(&queries[qi, 0], &keys[i, 0], d)
                if filled < k:
                    _insert(&out_d2[qi, 0], &out_ids[qi, 0], filled, d2, i)
                    filled += 1
                    worst = out_d2[qi, k - 1] if filled == k else 0.0
                elif d2 < worst:
                    # strict <: on ties the earlier (lower) id already kept wins
                    _insert(&out_d2[qi, 0], &out_ids[qi, 0], k - 1, d2, i)
                    worst = out_d2[qi, k - 1]


def topk_l2(queries, keys, k):
    """k nearest keys per query under squared L2.

    queries (Q, d), keys (N, d) of matching float dtype, 1 <= k <= N.
    Returns (d2 (Q, k) float64, ids (Q, k) int64), rows ascending by (d2, id).
    """
    queries = np.ascontiguousarray(queries)
    keys = np.ascontiguousarray(keys)
    if queries.dtype != keys.dtype:
        queries = queries.astype(keys.dtype)
    n = keys.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} keys")
    if keys.dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported key dtype {keys.dtype}")
    out_d2 = np.empty((queries.shape[0], k), dtype=np.float64)
    out_ids = np.empty((queries.shape[0], k), dtype=np.int64)
    _topk_l2_impl(queries, keys, k, out_d2, out_ids)
    return out_d2, out_ids


def _subset_l2_impl(real_t[::1] query, real_t[:, ::1] keys, long long[::1] ids,
                    double[::1] out):
    cdef Py_ssize_t m = ids.shape[0]
    cdef Py_ssize_t d = query.shape[0]
    cdef Py_ssize_t i
    with nogil:
        for i in range(m):
            out[i] = _row_sq(&query[0], &keys[ids[i], 0], d)


def subset_l2(query, keys, ids):
    """Exact float64 squared distances from one query to keys[ids]."""
    query = np.ascontiguousarray(query)
    keys = np.ascontiguousarray(keys)
    if query.dtype != keys.dtype:
        query = query.astype(keys.dtype)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if keys.dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported key dtype {keys.dtype}")
    out = np.empty(ids.shape[0], dtype=np.float64)
    _subset_l2_impl(query, keys, ids, out)
    return out


def _lut_scan_impl(const unsigned char[:, ::1] codes, double[:, ::1] lut,
                   long long[::1] ids, double[::1] out):
    cdef Py_ssize_t m = ids.shape[0]
    cdef Py_ssize_t b = codes.shape[1]
    cdef Py_ssize_t i, j
    cdef const unsigned char* row
    cdef double acc
    with nogil:
        for i in range(m):
            row = &codes[ids[i], 0]
            acc = 0.0
            for j in range(b):
                acc += lut[j, row[j]]
            out[i] = acc


def lut_scan(codes, lut, ids):
    """Asymmetric quantized distances: sum_j lut[j, codes[i, j]] for i in ids.

    codes (N, B) uint8, lut (B, 256) float64, ids (m,) int64 -> (m,) float64.
    """
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    lut = np.ascontiguousarray(lut, dtype=np.float64)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    out = np.empty(ids.shape[0], dtype=np.float64)
    _lut_scan_impl(codes, lut, ids, out)
    return out
