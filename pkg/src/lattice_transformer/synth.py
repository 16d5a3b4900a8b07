"""Synthetic translation corpora with confusion-network style lattice noise."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lattice import Lattice, make_lattice, write_jsonl
from .vocab import SPECIALS

TASKS = ("copy", "reverse", "map")


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 50
    min_len: int = 3
    max_len: int = 8
    task: str = "copy"
    noise_rate: float = 0.5
    fanout: int = 3
    seed: int = 0
    # allowed successors per token in the source bigram model; 0 = i.i.d. tokens
    successors: int = 0

    def __post_init__(self):
        if self.vocab_size < len(SPECIALS):
            raise ValueError("vocab_size must leave room for the 4 reserved ids")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.fanout < 2:
            raise ValueError("fanout must be >= 2")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.content_size < self.fanout:
            raise ValueError("vocabulary too small for the requested fanout")
        if self.successors < 0 or self.successors > self.content_size:
            raise ValueError("successors must lie in [0, content vocabulary size]")

    @property
    def content_size(self) -> int:
        return self.vocab_size - len(SPECIALS)

    def words(self) -> list[str]:
        return [f"w{i}" for i in range(len(SPECIALS), self.vocab_size)]


def _tables(spec: SynthSpec):
    rng = np.random.default_rng([spec.seed, 1])
    v = spec.content_size
    perm = rng.permutation(v)
    succ = [np.sort(rng.choice(v, spec.successors, replace=False)) for _ in range(v)] if spec.successors else None
    return perm, succ


def transform(tokens: list[str], spec: SynthSpec, perm=None) -> list[str]:
    if spec.task == "copy":
        return list(tokens)
    if spec.task == "reverse":
        return list(reversed(tokens))
    if perm is None:
        perm, _ = _tables(spec)
    words = spec.words()
    index = {w: i for i, w in enumerate(words)}
    return [words[perm[index[t]]] for t in tokens]


def gen_pairs(spec: SynthSpec, size: int, offset: int = 0) -> list[tuple[list[str], list[str]]]:
    """``size`` seeded (source, target) pairs; ``offset`` selects a disjoint stream."""
    words = spec.words()
    perm, succ = _tables(spec)
    rng = np.random.default_rng([spec.seed, 2, offset])
    out = []
    for _ in range(size):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        ids = [int(rng.integers(spec.content_size))]
        for _ in range(n - 1):
            if succ is None:
                ids.append(int(rng.integers(spec.content_size)))
            else:
                ids.append(int(rng.choice(succ[ids[-1]])))
        src = [words[i] for i in ids]
        out.append((src, transform(src, spec, perm)))
    return out


def corrupt_to_lattice(source: list[str], spec: SynthSpec, rng: np.random.Generator | None = None
                       ) -> tuple[Lattice, list[str]]:
    """Turn a source sentence into a scored lattice and its 1-best path.

    Each position independently becomes, with probability ``noise_rate``, a
    ``fanout``-way branch: the true token plus distinct random distractors.
    Raw weights are Beta(5, 2) for the true token and Uniform(0, 1) for each
    distractor, normalised per branch, so the true token usually but not
    always scores highest.
    """
    if rng is None:
        rng = np.random.default_rng([spec.seed, 3])
    words = spec.words()
    tokens = ["<s>"]
    forward = [1.0]
    edges = []
    prev = [0]
    onebest = []
    for tok in source:
        if rng.random() < spec.noise_rate:
            others = [w for w in words if w != tok]
            picks = rng.choice(len(others), spec.fanout - 1, replace=False)
            cands = [tok] + [others[i] for i in picks]
            raw = np.concatenate([[rng.beta(5.0, 2.0)], rng.random(spec.fanout - 1)])
            raw = np.maximum(raw, 1e-12)
            order = rng.permutation(spec.fanout)
            cands = [cands[i] for i in order]
            probs = raw[order] / raw[order].sum()
            # exact children sum; absorbs rounding into the last entry
            probs[-1] = 1.0 - probs[:-1].sum()
        else:
            cands, probs = [tok], np.array([1.0])
        ids = list(range(len(tokens), len(tokens) + len(cands)))
        tokens.extend(cands)
        forward.extend(float(p) for p in probs)
        edges.extend((p, c) for p in prev for c in ids)
        onebest.append(cands[int(np.argmax(probs))])
        prev = ids
    sink = len(tokens)
    tokens.append("</s>")
    forward.append(1.0)
    edges.extend((p, sink) for p in prev)
    return make_lattice(tokens, edges, forward), onebest


def gen_corpus(spec: SynthSpec, size: int, offset: int = 0):
    """Pairs plus their lattices and 1-best strings, with per-sentence seeds."""
    pairs = gen_pairs(spec, size, offset)
    lattices, onebest = [], []
    for i, (src, _) in enumerate(pairs):
        lat, best = corrupt_to_lattice(src, spec, np.random.default_rng([spec.seed, 4, offset, i]))
        lattices.append(lat)
        onebest.append(best)
    return pairs, lattices, onebest


SPLITS = (("train", 0.8), ("dev", 0.1), ("test", 0.1))


def write_corpus(out_dir, spec: SynthSpec, size: int) -> dict[str, int]:
    """Write train/dev/test splits of source/target/lattices/1-best files."""
    out_dir = Path(out_dir)
    pairs, lattices, onebest = gen_corpus(spec, size)
    counts = {}
    start = 0
    for k, (name, frac) in enumerate(SPLITS):
        end = size if k == len(SPLITS) - 1 else start + int(round(size * frac))
        d = out_dir / name
        d.mkdir(parents=True, exist_ok=True)
        sl = slice(start, end)
        with open(d / "source.txt", "w", encoding="utf-8") as fh:
            fh.writelines(" ".join(s) + "\n" for s, _ in pairs[sl])
        with open(d / "target.txt", "w", encoding="utf-8") as fh:
            fh.writelines(" ".join(t) + "\n" for _, t in pairs[sl])
        with open(d / "onebest.txt", "w", encoding="utf-8") as fh:
            fh.writelines(" ".join(b) + "\n" for b in onebest[sl])
        write_jsonl(d / "lattices.jsonl", lattices[sl])
        counts[name] = end - start
        start = end
    return counts
