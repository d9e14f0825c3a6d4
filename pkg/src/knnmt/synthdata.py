"""Deterministic two-domain synthetic translation task.

Sentences are drawn from a small template grammar over an invented lexicon;
translation is word-for-word via a lexicon table, with a marker word that
swaps the following pair (so alignment is not purely monotonic). Domain B
re-senses a subset of domain A's words (the adaptation signal) and adds its
own words on a long-tailed frequency profile (the retrieval signal: rare
words are hard to fit from a handful of gradient steps but trivial to
retrieve from a datastore).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from knnmt.tokenizer import ParallelCorpus

_CONS = "bdfgklmnprstvz"
_VOWE = "aeiou"

SWAP_MARKER_SRC = "xo"
SWAP_MARKER_TGT = "rev"


def _word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(_CONS[rng.integers(len(_CONS))] + _VOWE[rng.integers(len(_VOWE))]
                   for _ in range(syllables))


def _lexicon(rng: np.random.Generator, n: int, prefix: str) -> list[tuple[str, str]]:
    pairs = []
    seen_src: set[str] = set()
    seen_tgt: set[str] = set()
    while len(pairs) < n:
        s = _word(rng, int(rng.integers(2, 4)))
        t = prefix + _word(rng, int(rng.integers(2, 4)))
        if s in seen_src or t in seen_tgt:
            continue
        seen_src.add(s)
        seen_tgt.add(t)
        pairs.append((s, t))
    return pairs


@dataclass
class TwoDomainTask:
    """Fixed task instance: lexicons plus samplers for both domains."""

    core: dict[str, str]  # shared vocabulary, same sense in both domains
    domain_a: dict[str, str]  # A-specific senses
    domain_b: dict[str, str]  # B senses: re-sensed A words + B-only rare words
    b_rare: list[str]  # the B-only source words, sampled long-tailed

    @classmethod
    def build(cls, seed: int = 0, core_words: int = 60, domain_words: int = 40,
              resensed: int = 25) -> "TwoDomainTask":
        rng = np.random.default_rng(seed)
        core = dict(_lexicon(rng, core_words, ""))
        a_entries = _lexicon(rng, domain_words, "")
        domain_a = dict(a_entries)
        # first `resensed` A words get a different B translation; the rest of
        # B's vocabulary is new source words
        b_senses = _lexicon(rng, resensed, "b")
        domain_b = {a_entries[i][0]: b_senses[i][1] for i in range(resensed)}
        b_only = _lexicon(rng, domain_words - resensed, "q")
        domain_b.update(b_only)
        return cls(core=core, domain_a=domain_a, domain_b=domain_b,
                   b_rare=[s for s, _ in b_only])

    def _sample_sentence(self, rng: np.random.Generator, lexicon: dict[str, str],
                         specials: list[str], special_p: float) -> tuple[str, str]:
        core_words = sorted(self.core)
        lex_words = sorted(lexicon)
        length = int(rng.integers(4, 9))
        src: list[str] = []
        for _ in range(length):
            if specials and rng.random() < special_p:
                # long-tailed choice: rank r picked with weight 1/(r+1)
                ranks = np.arange(len(specials), dtype=np.float64)
                w = 1.0 / (ranks + 1.0)
                src.append(specials[rng.choice(len(specials), p=w / w.sum())])
            elif rng.random() < 0.45 and lex_words:
                src.append(lex_words[rng.integers(len(lex_words))])
            else:
                src.append(core_words[rng.integers(len(core_words))])
        if rng.random() < 0.3 and length >= 3:
            src.insert(int(rng.integers(0, length - 2)), SWAP_MARKER_SRC)
        table = {**self.core, **lexicon}
        tgt: list[str] = []
        i = 0
        while i < len(src):
            w = src[i]
            if w == SWAP_MARKER_SRC and i + 2 < len(src):
                tgt.extend([SWAP_MARKER_TGT, table[src[i + 2]], table[src[i + 1]]])
                i += 3
            elif w == SWAP_MARKER_SRC:
                tgt.append(SWAP_MARKER_TGT)
                i += 1
            else:
                tgt.append(table[w])
                i += 1
        return " ".join(src), " ".join(tgt)

    def sample_domain_a(self, n: int, seed: int) -> ParallelCorpus:
        rng = np.random.default_rng(seed)
        pairs = [self._sample_sentence(rng, self.domain_a, [], 0.0) for _ in range(n)]
        return ParallelCorpus(pairs=pairs, domain="A")

    def sample_domain_b(self, n: int, seed: int, rare_p: float = 0.22) -> ParallelCorpus:
        rng = np.random.default_rng(seed)
        pairs = [self._sample_sentence(rng, self.domain_b, self.b_rare, rare_p)
                 for _ in range(n)]
        return ParallelCorpus(pairs=pairs, domain="B")


def standard_bundle(task_seed: int = 7, a_train: int = 10_000, b_train: int = 3_000,
                    b_valid: int = 400, b_test: int = 400) -> dict[str, ParallelCorpus]:
    """The bundled corpus splits used by the desk-scale experiment."""
    task = TwoDomainTask.build(seed=task_seed)
    return {
        "a_train": task.sample_domain_a(a_train, seed=task_seed + 1),
        "b_train": task.sample_domain_b(b_train, seed=task_seed + 2),
        "b_valid": task.sample_domain_b(b_valid, seed=task_seed + 3),
        "b_test": task.sample_domain_b(b_test, seed=task_seed + 4),
    }
