"""Greedy and beam decoding over the model distribution, optionally
interpolated with the retrieval distribution at every step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from knnmt import autodiff as ad
from knnmt.datastore import Datastore, search_exact_batch
from knnmt.index import ClusteredIndex, search_clustered_batch
from knnmt.knn import KnnParams, aggregate_probs, interpolate
from knnmt.model import TranslationModel
from knnmt.tokenizer import BOS_ID, EOS_ID, BpeVocab


@dataclass
class KnnSource:
    """A datastore to decode against, searched exactly or via its index."""

    datastore: Datastore
    params: KnnParams
    index: ClusteredIndex | None = None
    nprobe: int = 8

    def retrieve(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k = min(self.params.k, len(self.datastore))
        if self.index is not None:
            return search_clustered_batch(self.index, self.datastore, queries, k,
                                          min(self.nprobe, self.index.n_clusters))
        return search_exact_batch(self.datastore, queries, k)


def _combined_rows(probs: np.ndarray, hiddens: np.ndarray, knn: KnnSource | None) -> np.ndarray:
    """Per-row next-token distribution in float64; retrieval-mixed if enabled."""
    rows = probs.astype(np.float64)
    if knn is None:
        return rows
    dists, vals = knn.retrieve(hiddens)
    for i in range(len(rows)):
        if len(vals[i]) == 0:
            continue  # no neighbors: fall back to the model distribution
        p_knn = np.zeros(rows.shape[1], dtype=np.float64)
        for v, p in aggregate_probs(dists[i], vals[i], knn.params.temperature,
                                    knn.params.squared).items():
            p_knn[v] = p
        rows[i] = interpolate(rows[i], p_knn, knn.params.interp_weight)
    return rows


def greedy_translate_batch(model: TranslationModel, src_batch: list[list[int]],
                           knn: KnnSource | None = None, max_len: int = 64) -> list[list[int]]:
    """Argmax rollout for a batch of tokenized sources; returns id sequences
    without BOS/EOS. Empty sources decode to empty outputs."""
    if knn is not None and knn.datastore.dim != model.shape.d_model:
        raise ValueError(f"datastore dim {knn.datastore.dim} does not match model d_model {model.shape.d_model}")
    live_idx = [i for i, s in enumerate(src_batch) if len(s) > 0]
    outputs: list[list[int]] = [[] for _ in src_batch]
    if not live_idx:
        return outputs
    s_len = max(len(src_batch[i]) for i in live_idx)
    src = np.zeros((len(live_idx), s_len), dtype=np.int64)
    valid = np.zeros((len(live_idx), s_len), dtype=bool)
    for r, i in enumerate(live_idx):
        src[r, : len(src_batch[i])] = src_batch[i]
        valid[r, : len(src_batch[i])] = True
    memory = model.encode_batch(src, valid)
    prefixes = np.full((len(live_idx), 1), BOS_ID, dtype=np.int64)
    finished = np.zeros(len(live_idx), dtype=bool)
    for _ in range(min(max_len, model.shape.max_len - 1)):
        hidden, probs = model.decode_batch(memory, valid, prefixes)
        t = prefixes.shape[1]
        last_h = hidden.data.reshape(len(live_idx), t, -1)[:, -1, :]
        last_p = probs.data.reshape(len(live_idx), t, -1)[:, -1, :]
        combined = _combined_rows(last_p, last_h, knn)
        nxt = combined.argmax(axis=1)
        nxt[finished] = EOS_ID
        prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
        finished |= nxt == EOS_ID
        if finished.all():
            break
    for r, i in enumerate(live_idx):
        ids = prefixes[r, 1:].tolist()
        outputs[i] = ids[: ids.index(EOS_ID)] if EOS_ID in ids else ids
    return outputs


def beam_translate(model: TranslationModel, src_ids: list[int], knn: KnnSource | None = None,
                   beam: int = 4, max_len: int = 64) -> list[int]:
    """Beam search with average log-probability ranking; beam=1 reduces to the
    greedy rollout."""
    if len(src_ids) == 0:
        return []
    if knn is not None and knn.datastore.dim != model.shape.d_model:
        raise ValueError(f"datastore dim {knn.datastore.dim} does not match model d_model {model.shape.d_model}")
    memory_single = model.encode_batch(np.asarray([src_ids]))
    s_len = len(src_ids)
    hyps: list[tuple[list[int], float]] = [([BOS_ID], 0.0)]
    done: list[tuple[list[int], float]] = []
    for _ in range(min(max_len, model.shape.max_len - 1)):
        if not hyps:
            break
        width = len(hyps)
        tiled = ad.constant(np.tile(memory_single.data, (width, 1)), dtype=model.dtype)
        prefixes = np.asarray([h for h, _ in hyps], dtype=np.int64)
        hidden, probs = model.decode_batch(tiled, None, prefixes)
        t = prefixes.shape[1]
        last_h = hidden.data.reshape(width, t, -1)[:, -1, :]
        last_p = probs.data.reshape(width, t, -1)[:, -1, :]
        combined = _combined_rows(last_p, last_h, knn)
        cands: list[tuple[list[int], float]] = []
        for r, (prefix, score) in enumerate(hyps):
            logp = np.log(np.maximum(combined[r], 1e-300))
            # ties broken by lower token id, matching argmax at beam=1
            order = np.lexsort((np.arange(combined.shape[1]), -combined[r]))
            for tok in order[:beam]:
                cands.append((prefix + [int(tok)], score + float(logp[tok])))
        cands.sort(key=lambda h: h[1], reverse=True)
        hyps = []
        for prefix, score in cands[: 2 * beam]:
            if prefix[-1] == EOS_ID:
                done.append((prefix, score / (len(prefix) - 1)))
            elif len(hyps) < beam:
                hyps.append((prefix, score))
        if len(done) >= beam:
            break
    if not done:
        done = [(prefix + [EOS_ID], score / len(prefix)) for prefix, score in hyps]
    best = max(done, key=lambda h: h[1])[0]
    return best[1 : best.index(EOS_ID)] if EOS_ID in best else best[1:]


def translate(model: TranslationModel, src_vocab: BpeVocab, tgt_vocab: BpeVocab, text: str,
              knn: KnnSource | None = None, beam: int = 1, max_len: int = 64) -> str:
    """Translate one sentence of raw text."""
    src_ids = src_vocab.encode(text)
    if beam <= 1:
        out_ids = greedy_translate_batch(model, [src_ids], knn=knn, max_len=max_len)[0]
    else:
        out_ids = beam_translate(model, src_ids, knn=knn, beam=beam, max_len=max_len)
    return tgt_vocab.decode(out_ids)


def translate_corpus(model: TranslationModel, src_vocab: BpeVocab, tgt_vocab: BpeVocab,
                     texts: list[str], knn: KnnSource | None = None, beam: int = 1,
                     max_len: int = 64, batch_size: int = 64) -> list[str]:
    """Translate many sentences; greedy decoding is batched."""
    if beam <= 1:
        out: list[str] = []
        for start in range(0, len(texts), batch_size):
            chunk = [src_vocab.encode(t) for t in texts[start : start + batch_size]]
            out.extend(tgt_vocab.decode(ids) for ids in
                       greedy_translate_batch(model, chunk, knn=knn, max_len=max_len))
        return out
    return [translate(model, src_vocab, tgt_vocab, t, knn=knn, beam=beam, max_len=max_len)
            for t in texts]
