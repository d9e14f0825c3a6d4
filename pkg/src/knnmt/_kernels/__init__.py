"""Search kernels: compiled extension plus NumPy fallback.

When the extension is built, top-k dispatches by shape: the fused compiled
scan wins for single queries and small key sets, while the BLAS-backed
expansion in the fallback wins once the query-by-key product is gemm-bound
(measured in benchmarks/bench_kernels.py). Candidate re-ranks and quantized
LUT scans always prefer the compiled path. Set KNNMT_NO_EXT=1 to force the
fallback everywhere.
"""

import os

from knnmt._kernels import _kernels_py

_cy = None
if os.environ.get("KNNMT_NO_EXT") != "1":
    try:
        from knnmt._kernels import _kernels_cy as _cy  # type: ignore[attr-defined]
    except ImportError:
        _cy = None

BACKEND = "compiled" if _cy is not None else "numpy"

# below these sizes the fused compiled scan beats the gemm-based fallback
_SMALL_QUERY_COUNT = 2
_SMALL_KEY_COUNT = 2048


def topk_l2(queries, keys, k):
    """k nearest keys per query under squared L2; rows ascending by (d2, id)."""
    if _cy is not None and (queries.shape[0] <= _SMALL_QUERY_COUNT
                            or keys.shape[0] <= _SMALL_KEY_COUNT):
        return _cy.topk_l2(queries, keys, k)
    return _kernels_py.topk_l2(queries, keys, k)


def subset_l2(query, keys, ids):
    """Exact float64 squared distances from one query to keys[ids]."""
    if _cy is not None:
        return _cy.subset_l2(query, keys, ids)
    return _kernels_py.subset_l2(query, keys, ids)


def lut_scan(codes, lut, ids):
    """Asymmetric quantized distances via a (dims, 256) lookup table."""
    if _cy is not None:
        return _cy.lut_scan(codes, lut, ids)
    return _kernels_py.lut_scan(codes, lut, ids)


__all__ = ["BACKEND", "topk_l2", "subset_l2", "lut_scan"]
