"""Compare the compiled search kernels against the NumPy fallback.

Run from the repository root:

    python benchmarks/bench_kernels.py

Workloads mirror training-time retrieval (many queries against a datastore of
decoder states), index building (nearest-centroid assignment), and quantized
candidate scans.
"""

import time

import numpy as np

from knnmt._kernels import _kernels_py

try:
    from knnmt._kernels import _kernels_cy
except ImportError:
    _kernels_cy = None


def bench(fn, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def report(name, py_time, cy_time):
    if cy_time is None:
        print(f"{name:<42} numpy {py_time * 1e3:8.1f} ms   compiled     (not built)")
    else:
        print(f"{name:<42} numpy {py_time * 1e3:8.1f} ms   compiled {cy_time * 1e3:8.1f} ms"
              f"   speedup {py_time / cy_time:5.2f}x")


def main():
    rng = np.random.default_rng(0)
    keys = rng.normal(size=(50_000, 64)).astype(np.float32)
    queries = rng.normal(size=(2048, 64)).astype(np.float32)
    centroids = rng.normal(size=(64, 64)).astype(np.float32)
    codes = rng.integers(0, 256, size=(50_000, 64), dtype=np.uint8)
    lut = rng.random((64, 256))
    cand = rng.choice(50_000, size=4_000, replace=False).astype(np.int64)
    q1 = queries[0]

    cases = [
        ("topk_l2: 2048 queries x 50k keys, k=8",
         lambda m: m.topk_l2(queries, keys, 8)),
        ("topk_l2: assign 50k keys to 64 centroids",
         lambda m: m.topk_l2(keys, centroids, 1)),
        ("subset_l2: 4k-candidate re-rank",
         lambda m: m.subset_l2(q1, keys, cand)),
        ("lut_scan: 4k quantized candidates",
         lambda m: m.lut_scan(codes, lut, cand)),
        ("lut_scan: full 50k quantized scan",
         lambda m: m.lut_scan(codes, lut, np.arange(50_000, dtype=np.int64))),
    ]
    print(f"keys: {keys.shape} float32, queries: {queries.shape}")
    for name, fn in cases:
        py_t = bench(lambda: fn(_kernels_py))
        cy_t = bench(lambda: fn(_kernels_cy)) if _kernels_cy is not None else None
        report(name, py_t, cy_t)


if __name__ == "__main__":
    main()
