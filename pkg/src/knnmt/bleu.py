"""Corpus-level BLEU with add-one smoothing, for desk-scale evaluation.

Scoring tokenizes by whitespace after subword markers have been joined; the
toy corpora carry no punctuation-attachment ambiguity that would need more.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

MAX_ORDER = 4


@dataclass
class BleuReport:
    bleu: float  # 0..100
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hypothesis_length: int
    reference_length: int

    def __str__(self) -> str:
        p = "/".join(f"{x * 100:.1f}" for x in self.precisions)
        return (f"BLEU = {self.bleu:.2f} ({p}) BP = {self.brevity_penalty:.3f} "
                f"hyp_len = {self.hypothesis_length} ref_len = {self.reference_length}")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: list[str], references: list[str]) -> BleuReport:
    """4-gram BLEU with exponential brevity penalty; zero match counts for
    n >= 2 are add-one smoothed."""
    if len(hypotheses) != len(references):
        raise ValueError(f"hypothesis/reference count mismatch: {len(hypotheses)} vs {len(references)}")
    if not references:
        raise ValueError("references must be non-empty")
    matched = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_toks, ref_toks = hyp.split(), ref.split()
        hyp_len += len(hyp_toks)
        ref_len += len(ref_toks)
        for n in range(1, MAX_ORDER + 1):
            hyp_counts = _ngrams(hyp_toks, n)
            ref_counts = _ngrams(ref_toks, n)
            total[n - 1] += max(len(hyp_toks) - n + 1, 0)
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    precisions = []
    for n in range(1, MAX_ORDER + 1):
        m, t = matched[n - 1], total[n - 1]
        if n >= 2 and m == 0:
            m, t = m + 1, t + 1
        precisions.append(m / t if t > 0 else 0.0)
    if min(precisions) > 0:
        geo = math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    else:
        geo = 0.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return BleuReport(bleu=100.0 * bp * geo, precisions=tuple(precisions),
                      brevity_penalty=bp, hypothesis_length=hyp_len, reference_length=ref_len)
