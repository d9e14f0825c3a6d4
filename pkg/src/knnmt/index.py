"""Clustered (inverted-file) index over a datastore, with optional 64-byte
scalar-quantized codes used as a candidate filter before exact re-ranking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from knnmt import _kernels
from knnmt.datastore import Datastore, Retrieved
from knnmt.io_binary import (
    check_magic,
    read_exact,
    read_f32_array,
    read_u32,
    read_u64,
    write_u32,
    write_u64,
)

INDEX_MAGIC = b"TKIX"
INDEX_VERSION = 1

CODE_BYTES = 64  # quantized key budget
RERANK_FACTOR = 4  # exact re-rank pool is RERANK_FACTOR * k candidates


@dataclass
class Quantizer:
    """Per-dimension 8-bit min/max scalar quantization of the first
    min(64, d) dimensions, one byte each."""

    lo: np.ndarray  # (B,) float32
    hi: np.ndarray  # (B,) float32

    @property
    def n_dims(self) -> int:
        return len(self.lo)

    @classmethod
    def fit(cls, keys: np.ndarray) -> "Quantizer":
        b = min(CODE_BYTES, keys.shape[1])
        return cls(lo=keys[:, :b].min(axis=0).astype(np.float32),
                   hi=keys[:, :b].max(axis=0).astype(np.float32))

    def _scale(self) -> np.ndarray:
        return (self.hi.astype(np.float64) - self.lo) / 255.0

    def encode(self, keys: np.ndarray) -> np.ndarray:
        b = self.n_dims
        scale = self._scale()
        safe = np.where(scale > 0, scale, 1.0)
        codes = np.rint((keys[:, :b].astype(np.float64) - self.lo) / safe)
        return np.clip(codes, 0, 255).astype(np.uint8)

    def lut(self, query: np.ndarray) -> np.ndarray:
        """(B, 256) table of (query_j - dequantized level)^2."""
        levels = self.lo.astype(np.float64)[:, None] + self._scale()[:, None] * np.arange(256)
        return (query[: self.n_dims].astype(np.float64)[:, None] - levels) ** 2


@dataclass
class ClusteredIndex:
    centroids: np.ndarray  # (C, d) float32
    offsets: np.ndarray  # (C + 1,) int64 into entry_ids
    entry_ids: np.ndarray  # (N,) int64, concatenated inverted lists
    generation: int = 0
    quantizer: Quantizer | None = None
    codes: np.ndarray | None = None  # (N, B) uint8 in datastore order

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    def list_for(self, cluster: int) -> np.ndarray:
        return self.entry_ids[self.offsets[cluster] : self.offsets[cluster + 1]]


def kmeans(keys: np.ndarray, n_clusters: int, iters: int = 10,
           seed: int = 0) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's iterations with seeded sampling init.

    Empty clusters are re-seeded from the largest cluster's farthest point.
    Returns (centroids, assignment, per-iteration objective after each
    assignment step); the objective list is non-increasing.
    """
    n = len(keys)
    if not 1 <= n_clusters <= n:
        raise ValueError(f"n_clusters={n_clusters} out of range for {n} keys")
    rng = np.random.default_rng(seed)
    centroids = keys[np.sort(rng.choice(n, size=n_clusters, replace=False))].astype(np.float32)
    objectives: list[float] = []
    for _ in range(iters):
        d2, nearest = _kernels.topk_l2(keys, centroids, 1)
        assign = nearest[:, 0]
        objectives.append(float(d2[:, 0].sum()))
        counts = np.bincount(assign, minlength=n_clusters)
        sums = np.zeros_like(centroids, dtype=np.float64)
        np.add.at(sums, assign, keys.astype(np.float64))
        nonempty = counts > 0
        centroids[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
        for c in np.flatnonzero(~nonempty):
            largest = int(np.argmax(counts))
            members = np.flatnonzero(assign == largest)
            far = members[np.argmax(d2[members, 0])]
            centroids[c] = keys[far]
            counts[largest] -= 1  # so repeated re-seeds spread across clusters
    # final assignment so inverted lists reflect the returned centroids
    d2, nearest = _kernels.topk_l2(keys, centroids, 1)
    objectives.append(float(d2[:, 0].sum()))
    return centroids, nearest[:, 0], objectives


def build_clustered_index(ds: Datastore, n_clusters: int, quantize: bool = False,
                          kmeans_iters: int = 10, seed: int = 0) -> ClusteredIndex:
    centroids, assign, _ = kmeans(ds.keys, n_clusters, iters=kmeans_iters, seed=seed)
    order = np.lexsort((np.arange(len(ds)), assign))
    entry_ids = np.arange(len(ds), dtype=np.int64)[order]
    counts = np.bincount(assign, minlength=n_clusters)
    offsets = np.zeros(n_clusters + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    quantizer = codes = None
    if quantize:
        quantizer = Quantizer.fit(ds.keys)
        codes = quantizer.encode(ds.keys)
    return ClusteredIndex(centroids=centroids, offsets=offsets, entry_ids=entry_ids,
                          generation=ds.generation, quantizer=quantizer, codes=codes)


def _topk_by_distance(d2: np.ndarray, ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((ids, d2))[:k]
    return d2[order], ids[order]


def search_clustered(index: ClusteredIndex, ds: Datastore, query: np.ndarray,
                     k: int, nprobe: int) -> Retrieved:
    """Scan the nprobe nearest clusters; quantized candidates are re-ranked by
    exact distance over RERANK_FACTOR * k before the final top-k, so returned
    distances are always true Euclidean values."""
    query = np.asarray(query)
    if query.shape != (ds.dim,):
        raise ValueError(f"query shape {query.shape} does not match datastore dim {ds.dim}")
    if not 1 <= nprobe <= index.n_clusters:
        raise ValueError(f"nprobe={nprobe} out of range for {index.n_clusters} clusters")
    cent_d2 = _kernels.subset_l2(query, index.centroids, np.arange(index.n_clusters, dtype=np.int64))
    _, probed = _topk_by_distance(cent_d2, np.arange(index.n_clusters, dtype=np.int64), nprobe)
    cands = np.concatenate([index.list_for(int(c)) for c in probed])
    if len(cands) == 0:
        return Retrieved(distances=np.zeros(0), values=np.zeros(0, dtype=np.int64),
                         ids=np.zeros(0, dtype=np.int64))
    if index.quantizer is not None:
        approx = _kernels.lut_scan(index.codes, index.quantizer.lut(query), cands)
        _, cands = _topk_by_distance(approx, cands, min(RERANK_FACTOR * k, len(cands)))
    exact = _kernels.subset_l2(query, ds.keys, cands)
    d2, ids = _topk_by_distance(exact, cands, min(k, len(cands)))
    return Retrieved(distances=np.sqrt(d2), values=ds.values[ids].astype(np.int64), ids=ids)


def search_clustered_batch(index: ClusteredIndex, ds: Datastore, queries: np.ndarray,
                           k: int, nprobe: int) -> tuple[np.ndarray, np.ndarray]:
    """(distances (Q, m), values (Q, m)) per query; m = min(k, smallest
    candidate pool), i.e. rows are truncated to a common width. Pools
    shorter than k only occur on toy stores."""
    results = [search_clustered(index, ds, q, k, nprobe) for q in queries]
    m = min(k, min(len(r) for r in results))
    dist = np.stack([r.distances[:m] for r in results])
    vals = np.stack([r.values[:m] for r in results])
    return dist, vals


def save_index(index: ClusteredIndex, path: str) -> None:
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        write_u32(f, INDEX_VERSION)
        c, d = index.centroids.shape
        write_u32(f, c, d)
        write_u64(f, len(index.entry_ids))
        write_u32(f, index.generation, 1 if index.quantizer is not None else 0)
        f.write(np.ascontiguousarray(index.centroids, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(index.offsets, dtype="<u8").tobytes())
        f.write(np.ascontiguousarray(index.entry_ids, dtype="<u4").tobytes())
        if index.quantizer is not None:
            write_u32(f, index.quantizer.n_dims)
            f.write(np.ascontiguousarray(index.quantizer.lo, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(index.quantizer.hi, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(index.codes, dtype=np.uint8).tobytes())


def load_index(path: str) -> ClusteredIndex:
    with open(path, "rb") as f:
        check_magic(f, INDEX_MAGIC, INDEX_VERSION)
        c, d = read_u32(f, 2, "cluster count and dim")
        (n,) = read_u64(f, 1, "entry count")
        generation, quantized = read_u32(f, 2, "generation and quantizer flag")
        centroids = read_f32_array(f, (c, d), "centroids")
        offsets = np.frombuffer(read_exact(f, 8 * (c + 1), "list offsets"), dtype="<u8").astype(np.int64)
        entry_ids = np.frombuffer(read_exact(f, 4 * n, "entry ids"), dtype="<u4").astype(np.int64)
        quantizer = codes = None
        if quantized:
            (b,) = read_u32(f, 1, "code dims")
            lo = read_f32_array(f, (b,), "quantizer lo")
            hi = read_f32_array(f, (b,), "quantizer hi")
            codes = np.frombuffer(read_exact(f, n * b, "codes"), dtype=np.uint8).reshape(n, b).copy()
            quantizer = Quantizer(lo=lo, hi=hi)
        if f.read(1):
            raise ValueError("trailing bytes after index payload")
    return ClusteredIndex(centroids=centroids, offsets=offsets, entry_ids=entry_ids,
                          generation=generation, quantizer=quantizer, codes=codes)
