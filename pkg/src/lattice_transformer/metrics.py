"""Corpus BLEU-4 (no smoothing) and position-wise token accuracy."""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Sequence


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def ngram_stats(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]], max_n: int = 4):
    """Clipped matches and totals per order, plus hypothesis/reference lengths."""
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def corpus_bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """BLEU on a 0-100 scale; any zero n-gram precision gives 0."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    matches, totals, c, r = ngram_stats(hyps, refs, max_n)
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = min(1.0, math.exp(1.0 - r / c))
    return 100.0 * bp * math.exp(log_p)


def token_accuracy(hyps, refs) -> float:
    """Matches at aligned positions over the longer length, pooled over the corpus.

    Accepts either one (hyp, ref) pair of token lists or two aligned lists of them.
    """
    if hyps and isinstance(hyps[0], str) or refs and isinstance(refs[0], str):
        hyps, refs = [hyps], [refs]
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    correct = total = 0
    for h, r in zip(hyps, refs):
        correct += sum(a == b for a, b in zip(h, r))
        total += max(len(h), len(r))
    return correct / total if total else 1.0
