"""Relative positional lattice matrix.

Entry (i, j) is the signed distance pos(i) - pos(j) minimised over the
source-to-sink paths that contain both nodes. Since ids are topological, a
path containing i < j visits i first, so such a path exists iff j is reachable
from i, and the extremes over paths are the shortest and longest i->j path
lengths:

    L[i][j] = -longest(i -> j)      L[j][i] = +shortest(i -> j)

(with the two swapped for the "max" variant). Pairs with no common path get
``None`` and become NEG_INF in the additive mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import Lattice, check

NEG_INF = -1e9
DEFAULT_CLIP = 16


@dataclass(frozen=True)
class LatticeMatrix:
    regular: np.ndarray  # n x n int64, clipped
    mask: np.ndarray  # n x n float64, 0 or NEG_INF
    clip: int

    @property
    def n(self) -> int:
        return self.regular.shape[0]


def _path_lengths(lat: Lattice) -> tuple[list[list[int | None]], list[list[int | None]]]:
    """All-pairs shortest and longest path lengths (edge counts) over the DAG."""
    n = len(lat)
    shortest: list[list[int | None]] = [[None] * n for _ in range(n)]
    longest: list[list[int | None]] = [[None] * n for _ in range(n)]
    for i in range(n):
        sh, lo = shortest[i], longest[i]
        sh[i] = lo[i] = 0
        for u in range(i, n):
            if sh[u] is None:
                continue
            for v in lat.children(u):
                s, l = sh[u] + 1, lo[u] + 1
                if sh[v] is None or s < sh[v]:
                    sh[v] = s
                if lo[v] is None or l > lo[v]:
                    lo[v] = l
    return shortest, longest


def lattice_matrix(lat: Lattice, reduce: str = "min") -> list[list[int | None]]:
    """Raw relative-position matrix; ``None`` marks pairs sharing no path."""
    check(lat)
    if reduce not in ("min", "max"):
        raise ValueError(f"reduce must be 'min' or 'max', got {reduce!r}")
    n = len(lat)
    shortest, longest = _path_lengths(lat)
    before, after = (longest, shortest) if reduce == "min" else (shortest, longest)
    out: list[list[int | None]] = [[None] * n for _ in range(n)]
    for i in range(n):
        out[i][i] = 0
        for j in range(i + 1, n):
            if shortest[i][j] is None:
                continue
            out[i][j] = -before[i][j]
            out[j][i] = after[i][j]
    return out


def clip(value: int, c: int) -> int:
    return max(-c, min(value, c))


def clip_and_split(raw: list[list[int | None]], c: int = DEFAULT_CLIP) -> LatticeMatrix:
    if c < 1:
        raise ValueError(f"clip radius must be >= 1, got {c}")
    n = len(raw)
    regular = np.zeros((n, n), dtype=np.int64)
    mask = np.zeros((n, n), dtype=np.float64)
    for i, row in enumerate(raw):
        for j, v in enumerate(row):
            if v is None:
                mask[i, j] = NEG_INF
            else:
                regular[i, j] = clip(v, c)
    return LatticeMatrix(regular, mask, c)


def embedding_indices(lm: LatticeMatrix, c: int | None = None) -> np.ndarray:
    """Rows of the (2c+1)-row lattice embedding table to gather, per pair."""
    c = lm.clip if c is None else c
    if c != lm.clip:
        raise ValueError(f"lattice matrix built with clip {lm.clip}, asked for {c}")
    return lm.regular + c


def build_lattice_matrix(lat: Lattice, c: int = DEFAULT_CLIP, reduce: str = "min") -> LatticeMatrix:
    return clip_and_split(lattice_matrix(lat, reduce), c)


def sequence_matrix(n: int, c: int = DEFAULT_CLIP) -> LatticeMatrix:
    """Standard relative positions i - j of a length-n sequence."""
    idx = np.arange(n)
    rel = np.clip(idx[:, None] - idx[None, :], -c, c).astype(np.int64)
    return LatticeMatrix(rel, np.zeros((n, n), dtype=np.float64), c)
