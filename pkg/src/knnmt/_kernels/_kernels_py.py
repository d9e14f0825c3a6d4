"""NumPy fallback for the search kernels.

Same contracts as the compiled module: exact squared Euclidean distances
accumulated in float64, results sorted ascending with ties broken by lower
entry id. The top-k scan uses the ||q||^2 - 2 q.K + ||K||^2 expansion to
shortlist candidates and then recomputes their distances directly, so the
returned distances match a direct scan to float64 rounding.
"""

import numpy as np

BACKEND = "numpy"

# query rows per gemm chunk; bounds the (chunk x N) scratch matrix
_CHUNK = 128


def _exact_sq(queries: np.ndarray, keys: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Direct float64 squared distances between queries[i] and keys[ids[i, :]]."""
    gathered = keys[ids].astype(np.float64)  # (Q, c, d)
    diff = gathered - queries.astype(np.float64)[:, None, :]
    return np.einsum("qcd,qcd->qc", diff, diff)


def topk_l2(queries: np.ndarray, keys: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest keys per query under squared L2.

    queries (Q, d), keys (N, d), 1 <= k <= N. Returns (d2 (Q, k) float64,
    ids (Q, k) int64), each row ascending by (d2, id).
    """
    queries = np.ascontiguousarray(queries)
    keys = np.ascontiguousarray(keys)
    q_n, n = queries.shape[0], keys.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} keys")
    keys64 = keys.astype(np.float64)
    key_sq = np.einsum("nd,nd->n", keys64, keys64)
    # shortlist window wider than k so expansion-formula rounding and exact
    # duplicates at the boundary cannot evict a true neighbor
    cand_count = min(n, 2 * k + 8)
    out_d2 = np.empty((q_n, k), dtype=np.float64)
    out_ids = np.empty((q_n, k), dtype=np.int64)
    for start in range(0, q_n, _CHUNK):
        q_chunk = queries[start : start + _CHUNK]
        chunk64 = q_chunk.astype(np.float64)
        d2 = key_sq[None, :] - 2.0 * (chunk64 @ keys64.T)
        d2 += np.einsum("cd,cd->c", chunk64, chunk64)[:, None]
        if cand_count < n:
            cand = np.argpartition(d2, cand_count - 1, axis=1)[:, :cand_count].astype(np.int64)
        else:
            cand = np.broadcast_to(np.arange(n, dtype=np.int64), (d2.shape[0], n)).copy()
        exact = _exact_sq(q_chunk, keys, cand)
        order = np.lexsort((cand, exact), axis=1)
        rows = np.arange(exact.shape[0])[:, None]
        exact_sorted = exact[rows, order]
        ids_sorted = cand[rows, order]
        for r in range(exact.shape[0]):
            # a near-tie spanning the window edge could hide a lower id outside it
            margin = 1e-9 * (1.0 + exact_sorted[r, k - 1])
            if cand_count < n and exact_sorted[r, k - 1] + margin >= exact_sorted[r, cand_count - 1]:
                full = subset_l2(q_chunk[r], keys, np.arange(n, dtype=np.int64))
                full_order = np.lexsort((np.arange(n), full))[:k]
                out_d2[start + r] = full[full_order]
                out_ids[start + r] = full_order.astype(np.int64)
            else:
                out_d2[start + r] = exact_sorted[r, :k]
                out_ids[start + r] = ids_sorted[r, :k]
    return out_d2, out_ids


def subset_l2(query: np.ndarray, keys: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Exact float64 squared distances from one query to keys[ids]."""
    diff = keys[ids].astype(np.float64) - query.astype(np.float64)[None, :]
    return np.einsum("md,md->m", diff, diff)


def lut_scan(codes: np.ndarray, lut: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Asymmetric quantized distances: sum_j lut[j, codes[i, j]] for i in ids.

    codes (N, B) uint8, lut (B, 256) float64, ids (m,) int64 -> (m,) float64.
    """
    sel = codes[ids]  # (m, B)
    return lut[np.arange(lut.shape[0])[None, :], sel].sum(axis=1)
