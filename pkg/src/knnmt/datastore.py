"""The (key, value) datastore: decoder hidden states paired with the next
ground-truth target token, plus exact Euclidean top-k search over it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from knnmt import _kernels
from knnmt.io_binary import check_magic, read_f32_array, read_u32, read_u32_array, read_u64, write_u32, write_u64
from knnmt.model import TranslationModel
from knnmt.tokenizer import PAD_ID

DATASTORE_MAGIC = b"TKDS"
DATASTORE_VERSION = 1


@dataclass
class Retrieved:
    """Up to k neighbors of one query, ascending by (distance, entry id).

    Distances are true (non-quantized) Euclidean values.
    """

    distances: np.ndarray  # (m,) float64
    values: np.ndarray  # (m,) int64 target-token ids
    ids: np.ndarray  # (m,) int64 datastore entry ids

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Datastore:
    keys: np.ndarray  # (N, d) float32
    values: np.ndarray  # (N,) uint32
    generation: int = 0

    def __post_init__(self):
        self.keys = np.ascontiguousarray(self.keys, dtype=np.float32)
        self.values = np.ascontiguousarray(self.values, dtype=np.uint32)
        if self.keys.ndim != 2 or len(self.keys) != len(self.values):
            raise ValueError(f"keys {self.keys.shape} do not align with {len(self.values)} values")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]


def batch_sentences(pairs: list[tuple[list[int], list[int]]], batch_size: int):
    """Yield (src (B, S), src_valid, tgt (B, T)) padded id batches, in order."""
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        s_len = max(len(s) for s, _ in chunk)
        t_len = max(len(t) for _, t in chunk)
        src = np.full((len(chunk), s_len), PAD_ID, dtype=np.int64)
        tgt = np.full((len(chunk), t_len), PAD_ID, dtype=np.int64)
        valid = np.zeros((len(chunk), s_len), dtype=bool)
        for i, (s, t) in enumerate(chunk):
            src[i, : len(s)] = s
            valid[i, : len(s)] = True
            tgt[i, : len(t)] = t
        yield src, valid, tgt


def build_datastore(model: TranslationModel, pairs: list[tuple[list[int], list[int]]],
                    batch_size: int = 64) -> Datastore:
    """One (hidden, next-token) entry per predicted target position, EOS
    included, in corpus order. pairs are tokenized (src_ids, tgt_ids) with
    targets framed BOS ... EOS.
    """
    if not pairs:
        raise ValueError("cannot build a datastore from an empty corpus")
    all_keys: list[np.ndarray] = []
    all_values: list[np.ndarray] = []
    for src, valid, tgt in batch_sentences(pairs, batch_size):
        hidden, _, targets = model.teacher_forced_batch(src, valid, tgt)
        t_len = tgt.shape[1] - 1
        h = hidden.data.reshape(len(src), t_len, -1)
        flat_targets = targets.reshape(len(src), t_len)
        for i in range(len(src)):
            n_pos = int((flat_targets[i] != PAD_ID).sum())
            all_keys.append(h[i, :n_pos].astype(np.float32))
            all_values.append(flat_targets[i, :n_pos].astype(np.uint32))
    return Datastore(keys=np.concatenate(all_keys), values=np.concatenate(all_values),
                     generation=model.generation)


def search_exact(ds: Datastore, query: np.ndarray, k: int) -> Retrieved:
    """The k entries nearest to query under Euclidean distance; ties broken
    by lower entry id. k larger than the datastore returns everything."""
    query = np.asarray(query)
    if query.shape != (ds.dim,):
        raise ValueError(f"query shape {query.shape} does not match datastore dim {ds.dim}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    d2, ids = _kernels.topk_l2(query[None, :], ds.keys, min(k, len(ds)))
    return Retrieved(distances=np.sqrt(d2[0]), values=ds.values[ids[0]].astype(np.int64), ids=ids[0])


def search_exact_batch(ds: Datastore, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(distances (Q, k), values (Q, k)) for many queries at once."""
    if queries.ndim != 2 or queries.shape[1] != ds.dim:
        raise ValueError(f"queries shape {queries.shape} does not match datastore dim {ds.dim}")
    d2, ids = _kernels.topk_l2(queries, ds.keys, min(k, len(ds)))
    return np.sqrt(d2), ds.values[ids].astype(np.int64)


def save_datastore(ds: Datastore, path: str) -> None:
    with open(path, "wb") as f:
        f.write(DATASTORE_MAGIC)
        write_u32(f, DATASTORE_VERSION)
        write_u64(f, len(ds))
        write_u32(f, ds.dim, ds.generation)
        f.write(np.ascontiguousarray(ds.keys, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ds.values, dtype="<u4").tobytes())


def load_datastore(path: str) -> Datastore:
    with open(path, "rb") as f:
        check_magic(f, DATASTORE_MAGIC, DATASTORE_VERSION)
        (n,) = read_u64(f, 1, "entry count")
        dim, generation = read_u32(f, 2, "dim and generation")
        keys = read_f32_array(f, (n, dim), "keys")
        values = read_u32_array(f, n, "values")
        if f.read(1):
            raise ValueError("trailing bytes after values")
    return Datastore(keys=keys, values=values, generation=generation)
