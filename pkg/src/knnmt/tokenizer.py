"""Parallel-corpus handling and byte-pair-encoding subwords.

Words are whitespace tokens; within a word, every piece except the last
carries the continuation marker "@@" as part of its token string, so the
vocabulary holds e.g. both "noti@@" and "cation". Merges apply in training
order, which makes encoding deterministic and prefix-stable.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
SPECIALS = ["<pad>", "<unk>", "<s>", "</s>"]
MARKER = "@@"


@dataclass
class ParallelCorpus:
    """Aligned (source, target) sentence pairs."""

    pairs: list[tuple[str, str]]
    domain: str = ""

    def __len__(self) -> int:
        return len(self.pairs)

    def sources(self) -> list[str]:
        return [s for s, _ in self.pairs]

    def targets(self) -> list[str]:
        return [t for _, t in self.pairs]

    def save(self, prefix: str) -> None:
        """Write the parallel file pair prefix.src / prefix.tgt."""
        for ext, lines in (("src", self.sources()), ("tgt", self.targets())):
            with open(f"{prefix}.{ext}", "w", encoding="utf-8") as f:
                for line in lines:
                    f.write(line + "\n")

    @classmethod
    def load(cls, prefix: str, domain: str = "") -> "ParallelCorpus":
        with open(f"{prefix}.src", encoding="utf-8") as f:
            src = [line.rstrip("\n") for line in f]
        with open(f"{prefix}.tgt", encoding="utf-8") as f:
            tgt = [line.rstrip("\n") for line in f]
        if len(src) != len(tgt):
            raise ValueError(f"parallel files differ in length: {len(src)} vs {len(tgt)}")
        return cls(pairs=list(zip(src, tgt)), domain=domain)


def encode_pairs(corpus: ParallelCorpus, src_vocab: "BpeVocab",
                 tgt_vocab: "BpeVocab") -> list[tuple[list[int], list[int]]]:
    """Tokenize a corpus for the model: target side framed BOS ... EOS.
    Pairs with an empty side are dropped."""
    out = []
    for s, t in corpus.pairs:
        src_ids = src_vocab.encode(s)
        tgt_ids = tgt_vocab.encode(t)
        if src_ids and tgt_ids:
            out.append((src_ids, [BOS_ID] + tgt_ids + [EOS_ID]))
    return out


def filter_by_length(corpus: ParallelCorpus, max_len: int = 250) -> ParallelCorpus:
    """Drop pairs where either side exceeds max_len whitespace tokens."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    kept = [(s, t) for s, t in corpus.pairs
            if len(s.split()) <= max_len and len(t.split()) <= max_len]
    return ParallelCorpus(pairs=kept, domain=corpus.domain)


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(c + MARKER for c in word[:-1]) + (word[-1],)


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str], joined: str) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(joined)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


@dataclass
class BpeVocab:
    merges: list[tuple[str, str]]
    token_to_id: dict[str, int]
    id_to_token: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.id_to_token:
            self.id_to_token = [""] * len(self.token_to_id)
            for tok, i in self.token_to_id.items():
                self.id_to_token[i] = tok

    def __len__(self) -> int:
        return len(self.id_to_token)

    @staticmethod
    def joined(pair: tuple[str, str]) -> str:
        return pair[0][: -len(MARKER)] + pair[1]

    @classmethod
    def train(cls, texts: list[str], merge_count: int) -> "BpeVocab":
        """Learn merge_count merges by descending pair frequency, ties broken
        lexicographically; merge_count 0 gives a character-level vocabulary."""
        if not texts or merge_count < 0:
            raise ValueError("need a non-empty corpus and merge_count >= 0")
        word_freq = Counter()
        for line in texts:
            word_freq.update(line.split())
        if not word_freq:
            raise ValueError("corpus contains no words")
        words = {w: _word_symbols(w) for w in word_freq}

        # both forms of every character, so any merge outcome stays in-vocab
        tokens: set[str] = set()
        for w in words:
            for c in w:
                tokens.add(c)
                tokens.add(c + MARKER)

        merges: list[tuple[str, str]] = []
        for _ in range(merge_count):
            pair_freq = Counter()
            for w, symbols in words.items():
                freq = word_freq[w]
                for a, b in zip(symbols, symbols[1:]):
                    pair_freq[(a, b)] += freq
            if not pair_freq:
                break
            best = min(pair_freq.items(), key=lambda kv: (-kv[1], kv[0]))[0]
            joined = cls.joined(best)
            merges.append(best)
            tokens.add(joined)
            words = {w: _merge_word(s, best, joined) for w, s in words.items()}

        ordered = SPECIALS + sorted(tokens)
        return cls(merges=merges, token_to_id={t: i for i, t in enumerate(ordered)})

    def encode(self, text: str) -> list[int]:
        """Subword ids for text; characters outside the alphabet become UNK."""
        ids: list[int] = []
        for word in text.split():
            symbols = _word_symbols(word)
            for pair in self.merges:
                if len(symbols) == 1:
                    break
                symbols = _merge_word(symbols, pair, self.joined(pair))
            ids.extend(self.token_to_id.get(s, UNK_ID) for s in symbols)
        return ids

    def decode(self, ids: list[int]) -> str:
        """Inverse of encode: join pieces, closing a word at each unmarked token.

        PAD/BOS/EOS are dropped; UNK renders as its literal token and closes
        the word.
        """
        words: list[str] = []
        current = ""
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            if i == UNK_ID:
                words.append(current + SPECIALS[UNK_ID])
                current = ""
                continue
            tok = self.id_to_token[i]
            if tok.endswith(MARKER):
                current += tok[: -len(MARKER)]
            else:
                words.append(current + tok)
                current = ""
        if current:
            words.append(current)
        return " ".join(words)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"#merges {len(self.merges)}\n")
            for a, b in self.merges:
                f.write(f"{a} {b}\n")
            f.write(f"#tokens {len(self.id_to_token)}\n")
            for tok in self.id_to_token:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "BpeVocab":
        with open(path, encoding="utf-8") as f:
            header = f.readline().split()
            if len(header) != 2 or header[0] != "#merges":
                raise ValueError(f"bad vocab file {path}: expected '#merges N' header")
            merges = []
            for _ in range(int(header[1])):
                a, b = f.readline().rstrip("\n").split(" ")
                if not a.endswith(MARKER):
                    raise ValueError(f"bad vocab file {path}: merge left side {a!r} lacks marker")
                merges.append((a, b))
            header = f.readline().split()
            if len(header) != 2 or header[0] != "#tokens":
                raise ValueError(f"bad vocab file {path}: expected '#tokens N' header")
            id_to_token = [f.readline().rstrip("\n") for _ in range(int(header[1]))]
        if id_to_token[:4] != SPECIALS:
            raise ValueError(f"bad vocab file {path}: special tokens missing or reordered")
        return cls(merges=merges, token_to_id={t: i for i, t in enumerate(id_to_token)},
                   id_to_token=id_to_token)
