"""Small encoder-decoder translation model with attention.

Every decoding position exposes both the output distribution and the hidden
vector that feeds the output projection; that vector is the retrieval key and
query for the datastore, and there is a single code path producing it
(`decode_batch`), whether building the datastore, training, or translating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from knnmt import autodiff as ad
from knnmt.autodiff import Array
from knnmt.io_binary import check_magic, read_exact, read_f32_array, read_u32, write_u32

CHECKPOINT_MAGIC = b"TKNN"
CHECKPOINT_VERSION = 1

NEG_INF = -1e9  # additive mask value; large but finite so softmax stays NaN-free


@dataclass(frozen=True)
class ModelShape:
    """Hyper-shape record; persisted in checkpoints."""

    src_vocab: int
    tgt_vocab: int
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 256
    max_len: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")


@dataclass
class StepOutput:
    """One target position: retrieval key/query vector + output distribution."""

    hidden: np.ndarray  # (d_model,)
    distribution: np.ndarray  # (tgt_vocab,) sums to 1


def sinusoid_table(max_len: int, d_model: int, dtype) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d_model)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


class TranslationModel:
    def __init__(self, shape: ModelShape, seed: int = 0, dtype=np.float32):
        self.shape = shape
        self.dtype = np.dtype(dtype)
        self.generation = 0
        self.params: dict[str, Array] = {}
        self._pos = sinusoid_table(shape.max_len, shape.d_model, self.dtype)
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(shape.d_model)

        def w(name, *dims):
            self.params[name] = ad.parameter(rng.uniform(-bound, bound, dims).astype(self.dtype))

        def ln(name):
            self.params[f"{name}.g"] = ad.parameter(np.ones(shape.d_model, dtype=self.dtype))
            self.params[f"{name}.b"] = ad.parameter(np.zeros(shape.d_model, dtype=self.dtype))

        def zeros(name, *dims):
            self.params[name] = ad.parameter(np.zeros(dims, dtype=self.dtype))

        d, ff = shape.d_model, shape.d_ff
        w("src_embed", shape.src_vocab, d)
        w("tgt_embed", shape.tgt_vocab, d)
        for i in range(shape.enc_layers):
            for proj in ("wq", "wk", "wv", "wo"):
                w(f"enc{i}.attn.{proj}", d, d)
            ln(f"enc{i}.ln1")
            w(f"enc{i}.ffn.w1", d, ff)
            zeros(f"enc{i}.ffn.b1", ff)
            w(f"enc{i}.ffn.w2", ff, d)
            zeros(f"enc{i}.ffn.b2", d)
            ln(f"enc{i}.ln2")
        ln("enc_ln")
        for i in range(shape.dec_layers):
            for proj in ("wq", "wk", "wv", "wo"):
                w(f"dec{i}.self.{proj}", d, d)
            ln(f"dec{i}.ln1")
            for proj in ("wq", "wk", "wv", "wo"):
                w(f"dec{i}.cross.{proj}", d, d)
            ln(f"dec{i}.ln2")
            w(f"dec{i}.ffn.w1", d, ff)
            zeros(f"dec{i}.ffn.b1", ff)
            w(f"dec{i}.ffn.w2", ff, d)
            zeros(f"dec{i}.ffn.b2", d)
            ln(f"dec{i}.ln3")
        ln("out_ln")
        w("out_proj", d, shape.tgt_vocab)
        zeros("out_bias", shape.tgt_vocab)

    # -- parameter plumbing ------------------------------------------------

    def parameters(self) -> list[tuple[str, Array]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- building blocks ----------------------------------------------------

    def _heads(self, x2d: Array, batch: int, length: int) -> Array:
        h, dh = self.shape.n_heads, self.shape.d_model // self.shape.n_heads
        x = ad.reshape(x2d, (batch, length, h, dh))
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (batch * h, length, dh))

    def _unheads(self, x: Array, batch: int, length: int) -> Array:
        h, dh = self.shape.n_heads, self.shape.d_model // self.shape.n_heads
        x = ad.reshape(x, (batch, h, length, dh))
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (batch * length, h * dh))

    def _attention(self, prefix: str, x2d: Array, kv2d: Array, batch: int,
                   q_len: int, kv_len: int, mask: np.ndarray | None) -> Array:
        """mask: additive (batch*heads, q_len, kv_len) or None."""
        p = self.params
        h, dh = self.shape.n_heads, self.shape.d_model // self.shape.n_heads
        q = self._heads(ad.matmul(x2d, p[f"{prefix}.wq"]), batch, q_len)
        k = self._heads(ad.matmul(kv2d, p[f"{prefix}.wk"]), batch, kv_len)
        v = self._heads(ad.matmul(kv2d, p[f"{prefix}.wv"]), batch, kv_len)
        scores = ad.scale(ad.bmm(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        if mask is not None:
            scores = ad.add(scores, ad.constant(mask, dtype=self.dtype))
        ctx = ad.bmm(ad.softmax(scores), v)
        return ad.matmul(self._unheads(ctx, batch, q_len), p[f"{prefix}.wo"])

    def _ffn(self, prefix: str, x2d: Array) -> Array:
        p = self.params
        inner = ad.relu(ad.add(ad.matmul(x2d, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return ad.add(ad.matmul(inner, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _ln(self, prefix: str, x2d: Array) -> Array:
        return ad.layer_norm(x2d, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _embed(self, table: str, ids: np.ndarray) -> Array:
        batch, length = ids.shape
        emb = ad.scale(ad.gather_rows(self.params[table], ids.reshape(-1)), np.sqrt(self.shape.d_model))
        pos = np.tile(self._pos[:length], (batch, 1))
        return ad.add(emb, ad.constant(pos, dtype=self.dtype))

    @staticmethod
    def _pad_mask(valid: np.ndarray, heads: int, q_len: int) -> np.ndarray:
        """(B, kv_len) validity -> additive (B*heads, q_len, kv_len)."""
        batch, kv_len = valid.shape
        add = np.where(valid, 0.0, NEG_INF).astype(np.float32)
        full = np.broadcast_to(add[:, None, None, :], (batch, heads, q_len, kv_len))
        return full.reshape(batch * heads, q_len, kv_len)

    # -- batched forward (the single source of hidden states) ---------------

    def encode_batch(self, src: np.ndarray, src_valid: np.ndarray | None = None) -> Array:
        """src (B, S) int ids -> encoder memory (B*S, d_model)."""
        src = np.asarray(src, dtype=np.int64)
        if src.ndim != 2 or src.shape[1] == 0:
            raise ValueError(f"encode expects a non-empty (B, S) id array, got {src.shape}")
        if src.min() < 0 or src.max() >= self.shape.src_vocab:
            raise ValueError(f"source id out of vocab (0..{self.shape.src_vocab - 1})")
        if src.shape[1] > self.shape.max_len:
            raise ValueError(f"source length {src.shape[1]} over max {self.shape.max_len}")
        batch, s_len = src.shape
        mask = None
        if src_valid is not None:
            mask = self._pad_mask(src_valid, self.shape.n_heads, s_len)
        x = self._embed("src_embed", src)
        for i in range(self.shape.enc_layers):
            normed = self._ln(f"enc{i}.ln1", x)
            x = ad.add(x, self._attention(f"enc{i}.attn", normed, normed, batch, s_len, s_len, mask))
            x = ad.add(x, self._ffn(f"enc{i}.ffn", self._ln(f"enc{i}.ln2", x)))
        return self._ln("enc_ln", x)

    def decode_batch(self, memory: Array, src_valid: np.ndarray | None, tgt_in: np.ndarray) -> tuple[Array, Array]:
        """Teacher-forced decoder pass.

        memory (B*S, d_model), tgt_in (B, T) prefix ids. Returns
        (hidden (B*T, d_model), probs (B*T, tgt_vocab)); hidden is the vector
        fed to the output projection, i.e. the retrieval key/query.
        """
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        if tgt_in.ndim != 2 or tgt_in.shape[1] == 0:
            raise ValueError(f"decode expects a non-empty (B, T) id array, got {tgt_in.shape}")
        if tgt_in.min() < 0 or tgt_in.max() >= self.shape.tgt_vocab:
            raise ValueError(f"target id out of vocab (0..{self.shape.tgt_vocab - 1})")
        if tgt_in.shape[1] > self.shape.max_len:
            raise ValueError(f"target length {tgt_in.shape[1]} over max {self.shape.max_len}")
        batch, t_len = tgt_in.shape
        s_len = memory.shape[0] // batch
        h = self.shape.n_heads

        causal = np.triu(np.full((t_len, t_len), NEG_INF, dtype=np.float32), k=1)
        self_mask = np.broadcast_to(causal, (batch * h, t_len, t_len)).copy()
        cross_mask = None
        if src_valid is not None:
            cross_mask = self._pad_mask(src_valid, h, t_len)

        x = self._embed("tgt_embed", tgt_in)
        for i in range(self.shape.dec_layers):
            normed = self._ln(f"dec{i}.ln1", x)
            x = ad.add(x, self._attention(f"dec{i}.self", normed, normed, batch, t_len, t_len, self_mask))
            x = ad.add(x, self._attention(f"dec{i}.cross", self._ln(f"dec{i}.ln2", x),
                                          memory, batch, t_len, s_len, cross_mask))
            x = ad.add(x, self._ffn(f"dec{i}.ffn", self._ln(f"dec{i}.ln3", x)))
        hidden = self._ln("out_ln", x)
        logits = ad.add(ad.matmul(hidden, self.params["out_proj"]), self.params["out_bias"])
        return hidden, ad.softmax(logits)

    def teacher_forced_batch(self, src: np.ndarray, src_valid: np.ndarray | None,
                             tgt: np.ndarray) -> tuple[Array, Array, np.ndarray]:
        """Full training pass over a padded batch.

        tgt (B, T) rows are BOS ... EOS PAD*. Feeds tgt[:, :-1] and returns
        (hidden, probs) flattened to (B*(T-1), .) plus the flat prediction
        targets tgt[:, 1:].
        """
        memory = self.encode_batch(src, src_valid)
        hidden, probs = self.decode_batch(memory, src_valid, tgt[:, :-1])
        return hidden, probs, np.asarray(tgt[:, 1:], dtype=np.int64).reshape(-1)

    # -- single-sentence contract operations ---------------------------------

    def encode(self, src_ids: list[int]) -> np.ndarray:
        """Encoder memory (S, d_model) for one sentence; inference only."""
        if len(src_ids) == 0:
            raise ValueError("encode: empty source")
        memory = self.encode_batch(np.asarray([src_ids]))
        return memory.data

    def decode_step(self, memory: np.ndarray, prefix_ids: list[int], bos_id: int = 2) -> StepOutput:
        """Next-token prediction for one prefix; returns the retrieval vector too."""
        if len(prefix_ids) == 0:
            raise ValueError("decode_step: empty prefix")
        if prefix_ids[0] != bos_id:
            raise ValueError(f"decode_step: prefix must start with BOS id {bos_id}")
        hidden, probs = self.decode_batch(ad.constant(memory, dtype=self.dtype), None,
                                          np.asarray([prefix_ids]))
        return StepOutput(hidden=hidden.data[-1].copy(), distribution=probs.data[-1].copy())

    def forward_teacher_forced(self, src_ids: list[int], tgt_ids: list[int],
                               bos_id: int = 2, eos_id: int = 3) -> list[StepOutput]:
        """One StepOutput per predicted position (every token after BOS, EOS included)."""
        if len(tgt_ids) < 2 or tgt_ids[0] != bos_id or tgt_ids[-1] != eos_id:
            raise ValueError("forward_teacher_forced: target must be BOS ... EOS")
        if len(tgt_ids) > self.shape.max_len:
            raise ValueError(f"target length {len(tgt_ids)} over max {self.shape.max_len}")
        memory = self.encode_batch(np.asarray([src_ids]))
        hidden, probs = self.decode_batch(memory, None, np.asarray([tgt_ids[:-1]]))
        return [StepOutput(hidden=hidden.data[i].copy(), distribution=probs.data[i].copy())
                for i in range(len(tgt_ids) - 1)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: TranslationModel, path: str) -> None:
    s = model.shape
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        write_u32(f, CHECKPOINT_VERSION)
        write_u32(f, s.src_vocab, s.tgt_vocab, s.d_model, s.n_heads,
                  s.enc_layers, s.dec_layers, s.d_ff, s.max_len, model.generation)
        write_u32(f, len(model.params))
        for name, p in model.params.items():
            raw = name.encode("utf-8")
            write_u32(f, len(raw))
            f.write(raw)
            write_u32(f, p.data.ndim, *p.data.shape)
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: str, dtype=np.float32) -> TranslationModel:
    with open(path, "rb") as f:
        check_magic(f, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        (src_v, tgt_v, d_model, n_heads, enc_l, dec_l, d_ff, max_len, generation) = read_u32(f, 9, "hyper-shape")
        shape = ModelShape(src_vocab=src_v, tgt_vocab=tgt_v, d_model=d_model, n_heads=n_heads,
                           enc_layers=enc_l, dec_layers=dec_l, d_ff=d_ff, max_len=max_len)
        model = TranslationModel(shape, seed=0, dtype=dtype)
        model.generation = generation
        (n_blocks,) = read_u32(f, 1, "parameter count")
        seen = set()
        for _ in range(n_blocks):
            (name_len,) = read_u32(f, 1, "name length")
            name = read_exact(f, name_len, "parameter name").decode("utf-8")
            (ndim,) = read_u32(f, 1, "ndim")
            dims = read_u32(f, ndim, f"shape of {name}")
            data = read_f32_array(f, tuple(dims), f"data of {name}")
            if name not in model.params:
                raise ValueError(f"unknown parameter {name!r} in checkpoint")
            if model.params[name].data.shape != data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {data.shape} vs {model.params[name].data.shape}")
            model.params[name].data = data.astype(dtype)
            seen.add(name)
        if len(seen) != len(model.params):
            missing = sorted(set(model.params) - seen)
            raise ValueError(f"checkpoint missing parameters: {missing[:3]}...")
        if f.read(1):
            raise ValueError("trailing bytes after final parameter block")
    return model
