"""Score-free lattices from several subword segmentations of one string."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .lattice import BOS, EOS, Lattice, LatticeError, make_lattice

DEFAULT_MARKER = "@@"


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class SpanToken:
    start: int
    end: int
    token: str


def strip_marker(token: str, marker: str = DEFAULT_MARKER) -> str:
    return token[: -len(marker)] if marker and token.endswith(marker) and len(token) > len(marker) else token


def segmentation_to_spans(surface: str, tokens: Sequence[str], marker: str = DEFAULT_MARKER) -> list[SpanToken]:
    spans = []
    pos = 0
    for tok in tokens:
        piece = strip_marker(tok, marker)
        if not piece:
            raise SegmentationError(f"empty token at offset {pos}")
        for k, ch in enumerate(piece):
            if pos + k >= len(surface) or surface[pos + k] != ch:
                raise SegmentationError(f"segmentation diverges from surface at offset {pos + k}")
        spans.append(SpanToken(pos, pos + len(piece), tok))
        pos += len(piece)
    if pos != len(surface):
        raise SegmentationError(f"segmentation diverges from surface at offset {pos}")
    return spans


def _forward_scores(n: int, children: list[set[int]]) -> list[float]:
    """Forward scores with every children set summing to one.

    Children sets that coincide or are disjoint get a uniform split. Overlapping
    sets are solved jointly as a small LP that maximises the smallest score.
    """
    fwd = [1.0] * n
    sets = sorted({tuple(sorted(c)) for c in children if c})
    # connected components of children sets that share a node
    owner: dict[int, int] = {}
    parent = list(range(len(sets)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for k, s in enumerate(sets):
        for c in s:
            if c in owner:
                parent[find(k)] = find(owner[c])
            else:
                owner[c] = k
    comps: dict[int, list[tuple[int, ...]]] = {}
    for k, s in enumerate(sets):
        comps.setdefault(find(k), []).append(s)
    for group in comps.values():
        if len(group) == 1:
            for c in group[0]:
                fwd[c] = 1.0 / len(group[0])
            continue
        nodes = sorted({c for s in group for c in s})
        col = {c: i for i, c in enumerate(nodes)}
        m = len(nodes)
        # variables: scores..., t ; maximise t subject to score >= t
        a_eq = np.zeros((len(group), m + 1))
        for r, s in enumerate(group):
            for c in s:
                a_eq[r, col[c]] = 1.0
        a_ub = np.zeros((m, m + 1))
        for i in range(m):
            a_ub[i, i] = -1.0
            a_ub[i, m] = 1.0
        cost = np.zeros(m + 1)
        cost[m] = -1.0
        res = linprog(cost, A_ub=a_ub, b_ub=np.zeros(m), A_eq=a_eq, b_eq=np.ones(len(group)),
                      bounds=[(0.0, 1.0)] * (m + 1), method="highs")
        if not res.success:
            raise LatticeError("witnessed adjacencies admit no consistent forward scores; "
                               "use free recombination")
        vals = np.clip(res.x[:m], 0.0, 1.0)
        for c, v in zip(nodes, vals):
            fwd[c] = float(round(v, 15))
    return fwd


def merge_segmentations(surface: str, segmentations: Sequence[Sequence[str]], marker: str = DEFAULT_MARKER,
                        free_recombination: bool = False) -> Lattice:
    """Merge segmentations into one lattice whose paths include every input.

    Nodes are deduplicated (start, end, token) spans ordered lexicographically,
    which is topological. By default an edge needs the two spans to be adjacent
    in some input; ``free_recombination`` links any span ending where another
    starts.
    """
    if not segmentations:
        raise SegmentationError("no segmentations to merge")
    n_chars = len(surface)
    all_spans = [segmentation_to_spans(surface, seg, marker) for seg in segmentations]
    src = SpanToken(-1, 0, BOS)
    snk = SpanToken(n_chars, n_chars + 1, EOS)
    nodes = sorted({s for spans in all_spans for s in spans} | {src, snk})
    index = {s: i for i, s in enumerate(nodes)}
    edges: set[tuple[int, int]] = set()
    if free_recombination:
        starts: dict[int, list[int]] = {}
        for s in nodes:
            starts.setdefault(s.start, []).append(index[s])
        for s in nodes:
            if s is not snk and s != snk:
                for j in starts.get(s.end, []):
                    edges.add((index[s], j))
    else:
        for spans in all_spans:
            chain = [src, *spans, snk]
            for a, b in zip(chain, chain[1:]):
                edges.add((index[a], index[b]))
    edge_list = sorted(edges)
    children: list[set[int]] = [set() for _ in nodes]
    for a, b in edge_list:
        children[a].add(b)
    fwd = _forward_scores(len(nodes), children)
    return make_lattice([s.token for s in nodes], edge_list, fwd)


def contains_path(lat: Lattice, tokens: Sequence[str]) -> bool:
    """True iff <s> tokens </s> labels some source-to-sink path."""
    want = [BOS, *tokens, EOS]
    if not lat.nodes or lat.nodes[0].token != BOS:
        return False
    frontier = {0}
    for label in want[1:]:
        frontier = {c for i in frontier for c in lat.children(i) if lat.nodes[c].token == label}
        if not frontier:
            return False
    return len(lat) - 1 in frontier
