"""Marginal and backward node scores derived from forward scores."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .lattice import Lattice, LatticeError, check, enumerate_paths

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreSet:
    forward: np.ndarray
    marginal: np.ndarray
    backward: np.ndarray

    def __len__(self):
        return len(self.forward)


def marginal_scores(lat: Lattice) -> np.ndarray:
    """m_i = f_i * sum of m_j over parents j, in topological order; m_source = f_source."""
    check(lat)
    n = len(lat)
    f = np.array(lat.forward, dtype=np.float64)
    m = np.zeros(n, dtype=np.float64)
    m[0] = f[0]
    for i in range(1, n):
        m[i] = f[i] * sum(m[j] for j in sorted(lat.parents(i)))
    return m


def backward_scores(lat: Lattice, m: np.ndarray) -> np.ndarray:
    """b_i = m_i / (sum of m_k over children k); the sink gets 1."""
    n = len(lat)
    if len(m) != n:
        raise LatticeError(f"marginal vector has {len(m)} entries for {n} nodes")
    b = np.ones(n, dtype=np.float64)
    for i in range(n - 1):
        denom = sum(m[k] for k in sorted(lat.children(i)))
        if denom <= 0.0:
            raise LatticeError(f"degenerate mass: children of node {i} carry zero marginal mass")
        b[i] = m[i] / denom
    return b


def compute_scores(lat: Lattice, sink_tol: float = 1e-9) -> ScoreSet:
    m = marginal_scores(lat)
    if abs(m[-1] - 1.0) > sink_tol:
        logger.warning("sink marginal mass is %.12g, forward scores look inconsistent", m[-1])
    b = backward_scores(lat, m)
    return ScoreSet(np.array(lat.forward, dtype=np.float64), m, b)


def oracle_marginal(lat: Lattice, cap: int | None = None) -> np.ndarray:
    """Marginal scores by explicit enumeration of distinct source->i prefixes."""
    paths = enumerate_paths(lat) if cap is None else enumerate_paths(lat, cap)
    f = lat.forward
    prefixes: list[set[tuple[int, ...]]] = [set() for _ in range(len(lat))]
    for path in paths:
        for k, node in enumerate(path):
            prefixes[node].add(tuple(path[: k + 1]))
    m = np.zeros(len(lat), dtype=np.float64)
    for i, pref in enumerate(prefixes):
        total = 0.0
        for p in pref:
            prod = 1.0
            for node in p:
                prod *= f[node]
            total += prod
        m[i] = total
    return m
