"""Random lattices and toy models shared by the test modules."""

import itertools

import numpy as np
import torch

from lattice_transformer.bpe import _forward_scores
from lattice_transformer.config import ModelConfig
from lattice_transformer.lattice import LatticeError, make_lattice
from lattice_transformer.model import BLOCKED_OUTPUTS
from lattice_transformer.numerics import DTYPE
from lattice_transformer.vocab import BOS_ID, EOS_ID


def diamond(fa=0.6, fb=0.4):
    return make_lattice(["<s>", "a", "b", "</s>"], [(0, 1), (0, 2), (1, 3), (2, 3)], [1.0, fa, fb, 1.0])


def stacked_diamonds(p=(0.5, 0.5), q=(0.3, 0.7)):
    # <s> -> {a1,b1} -> mid -> {a2,b2} -> </s>
    toks = ["<s>", "a1", "b1", "mid", "a2", "b2", "</s>"]
    edges = [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4), (3, 5), (4, 6), (5, 6)]
    return make_lattice(toks, edges, [1.0, p[0], p[1], 1.0, q[0], q[1], 1.0])


def grouped_lattice(rng, n):
    """Random lattice whose children sets are pairwise identical or disjoint.

    Built by repeatedly giving a random subset of childless nodes a shared
    group of new children with Dirichlet forward scores; leftovers join the
    sink. Paths of different lengths merge, so the relative-position matrix is
    not antisymmetric in general.
    """
    assert n >= 3
    tokens, forward, edges = ["<s>"], [1.0], []
    pending = [0]
    interior = n - 2
    nxt = 1
    while nxt <= interior:
        k = int(rng.integers(1, min(3, len(pending)) + 1))
        par = sorted(int(x) for x in rng.choice(pending, k, replace=False))
        g = int(rng.integers(1, min(3, interior - nxt + 1) + 1))
        group = list(range(nxt, nxt + g))
        probs = rng.dirichlet(np.ones(g))
        probs[-1] = 1.0 - probs[:-1].sum()
        for c, pr in zip(group, probs):
            tokens.append(f"t{int(rng.integers(20))}")
            forward.append(float(pr))
        edges += [(p, c) for p in par for c in group]
        pending = [p for p in pending if p not in par] + group
        nxt += g
    sink = n - 1
    tokens.append("</s>")
    forward.append(1.0)
    edges += [(p, sink) for p in pending]
    return make_lattice(tokens, sorted(edges), forward)


def random_dag_lattice(rng, n, tries=50):
    """Random DAG with arbitrary (possibly overlapping) children sets.

    Forward scores come from a feasibility LP; infeasible draws are retried.
    Overlapping children sets often force some scores to zero, so these
    lattices can lack backward scores.
    """
    for _ in range(tries):
        edges = set()
        for j in range(1, n - 1):
            k = int(rng.integers(1, min(3, j) + 1))
            for p in rng.choice(j, k, replace=False):
                edges.add((int(p), j))
        for i in range(n - 1):
            if not any(a == i for a, _ in edges):
                later = int(rng.integers(i + 1, n))
                edges.add((i, later))
        if not any(b == n - 1 for _, b in edges):
            edges.add((n - 2, n - 1))
        # anything without a parent other than the source hangs off the source
        for j in range(1, n):
            if not any(b == j for _, b in edges):
                edges.add((0, j))
        children = [set() for _ in range(n)]
        for a, b in edges:
            children[a].add(b)
        try:
            fwd = _forward_scores(n, children)
        except LatticeError:
            continue
        tokens = ["<s>"] + [f"t{int(rng.integers(20))}" for _ in range(n - 2)] + ["</s>"]
        return make_lattice(tokens, sorted(edges), fwd)
    raise RuntimeError("could not draw a consistent DAG lattice")


def random_lattices(seed, count, n_min=4, n_max=12, kind="mixed"):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        n = int(rng.integers(n_min, n_max + 1))
        use_grouped = kind == "grouped" or (kind == "mixed" and k % 2 == 0)
        out.append(grouped_lattice(rng, n) if use_grouped else random_dag_lattice(rng, n))
    return out


def brute_force_matrix(lat, paths, reduce=min):
    """Eq.-style definition: extreme of pos_p(i) - pos_p(j) over common paths."""
    n = len(lat)
    out = [[None] * n for _ in range(n)]
    for p in paths:
        pos = {node: k for k, node in enumerate(p)}
        for i in p:
            for j in p:
                d = pos[i] - pos[j]
                out[i][j] = d if out[i][j] is None else reduce(out[i][j], d)
    return out


def encoder_input(lats, clip=16, use_scores=True, vocab=None):
    """Batched encoder input for one or more lattices, with a vocabulary built from them."""
    from lattice_transformer.features import collate_sources, lattice_features
    from lattice_transformer.vocab import Vocab

    lats = [lats] if not isinstance(lats, (list, tuple)) else list(lats)
    vocab = vocab or Vocab.build(l.tokens for l in lats)
    return collate_sources([lattice_features(l, vocab, clip, scores=use_scores) for l in lats], clip, use_scores), vocab


def random_segmentation(rng, surface, marker="@@"):
    """Random tiling of ``surface``; every piece but the last carries ``marker``."""
    n = len(surface)
    cuts = sorted(int(c) for c in rng.choice(np.arange(1, n), int(rng.integers(0, n)), replace=False)) if n > 1 else []
    bounds = [0, *cuts, n]
    pieces = [surface[a:b] for a, b in zip(bounds, bounds[1:])]
    return [p + marker for p in pieces[:-1]] + pieces[-1:]


def random_segmentation_triples(seed, count, alphabet="abcd", min_len=1, max_len=10):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n = int(rng.integers(min_len, max_len + 1))
        surface = "".join(rng.choice(list(alphabet), n))
        out.append((surface, [random_segmentation(rng, surface) for _ in range(3)]))
    return out


# criterion number -> one summary line, printed by conftest at the end of the run
ACCEPTANCE_RESULTS = {}


def record_criterion(num, title, ok, detail):
    line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_RESULTS[num] = line
    print(line)
    return ok


# -- toy models -------------------------------------------------------------

def tiny(src_v=12, tgt_v=11, **kw):
    base = dict(d_model=16, heads=2, enc_layers=2, dec_layers=2, ffn_width=32, dropout_rate=0.0,
                label_smoothing=0.0, src_vocab_size=src_v, tgt_vocab_size=tgt_v, max_len=8)
    base.update(kw)
    return ModelConfig(**base)


def perturb_scalars(model, seed=0):
    """Give the score scalars non-trivial values (they start at zero)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.rsplit(".", 1)[-1] in ("w_m", "w_f", "w_b", "branch_logits"):
                p.copy_(torch.randn(p.shape, dtype=DTYPE, generator=g))
    return model


@torch.no_grad()
def brute_force_best(model, src, max_len):
    """Best length-normalised output by enumerating every allowed sequence."""
    allowed = [t for t in range(model.config.tgt_vocab_size) if t not in BLOCKED_OUTPUTS]
    content = [t for t in allowed if t != EOS_ID]
    mem = model.encode(src)
    best = None
    for length in range(1, max_len + 1):
        for body in itertools.product(content, repeat=length - 1):
            for last in allowed:
                if length < max_len and last != EOS_ID:
                    continue
                seq = [*body, last]
                prefix = torch.tensor([[BOS_ID, *seq[:-1]]])
                logp = model.log_probs(model.decode(prefix, mem, src))[0]
                score = sum(float(logp[k, tok]) for k, tok in enumerate(seq)) / len(seq)
                if best is None or score > best[1]:
                    best = (seq, score)
    ids = best[0][:-1] if best[0][-1] == EOS_ID else best[0]
    return ids, best[1]


