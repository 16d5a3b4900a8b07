"""One-time lattice preprocessing and padding into batched encoder inputs."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch

from .lattice import Lattice, from_sequence
from .numerics import DTYPE, NEG_INF
from .position import DEFAULT_CLIP, build_lattice_matrix, embedding_indices
from .scores import compute_scores
from .vocab import PAD, Vocab


@dataclass(frozen=True)
class LatticeFeatures:
    tokens: tuple[str, ...]
    token_ids: np.ndarray
    rel_index: np.ndarray  # regular + clip, in [0, 2c]
    mask: np.ndarray
    # None when built without scores (score-free inputs need not admit them)
    forward: np.ndarray | None
    marginal: np.ndarray | None
    backward: np.ndarray | None

    @property
    def n(self) -> int:
        return len(self.tokens)


def lattice_features(lat: Lattice, vocab: Vocab, clip: int = DEFAULT_CLIP, reduce: str = "min",
                     scores: bool = True) -> LatticeFeatures:
    """Token ids, relative-position indices, mask and (optionally) the three score vectors.

    With ``scores=False`` the score vectors are skipped, so lattices whose
    forward scores leave some node without mass can still be encoded.
    """
    lm = build_lattice_matrix(lat, clip, reduce)
    sc = compute_scores(lat) if scores else None
    return LatticeFeatures(
        tokens=tuple(lat.tokens),
        token_ids=np.array(vocab.encode(lat.tokens), dtype=np.int64),
        rel_index=embedding_indices(lm),
        mask=lm.mask,
        forward=sc.forward if sc else None,
        marginal=sc.marginal if sc else None,
        backward=sc.backward if sc else None,
    )


def sequence_features(tokens: Sequence[str], vocab: Vocab, clip: int = DEFAULT_CLIP) -> LatticeFeatures:
    return lattice_features(from_sequence(tokens), vocab, clip)


@dataclass
class EncoderInput:
    tokens: torch.Tensor  # (B, n) long
    rel_index: torch.Tensor  # (B, n, n) long
    lat_mask: torch.Tensor  # (B, n, n) additive; padding folded in
    node_pad: torch.Tensor  # (B, n) bool
    forward: torch.Tensor
    marginal: torch.Tensor
    backward: torch.Tensor
    use_scores: bool = True

    @property
    def scores(self):
        if not self.use_scores:
            return None
        return (self.forward, self.marginal, self.backward)

    @property
    def key_padding(self) -> torch.Tensor:
        """(B, 1, n) additive mask hiding padded encoder positions."""
        return torch.where(self.node_pad, NEG_INF, 0.0).to(DTYPE).unsqueeze(1)

    def __len__(self):
        return self.tokens.shape[0]

    def select(self, rows) -> EncoderInput:
        return EncoderInput(self.tokens[rows], self.rel_index[rows], self.lat_mask[rows], self.node_pad[rows],
                            self.forward[rows], self.marginal[rows], self.backward[rows], self.use_scores)


def collate_sources(feats: Sequence[LatticeFeatures], clip: int, use_scores: bool = True) -> EncoderInput:
    """Pad to the longest lattice. Padded rows see only themselves; real rows never see padding."""
    if not feats:
        raise ValueError("cannot collate an empty batch")
    if use_scores and any(f.forward is None for f in feats):
        raise ValueError("features were built without scores")
    b = len(feats)
    n = max(f.n for f in feats)
    tokens = np.full((b, n), PAD, dtype=np.int64)
    rel = np.full((b, n, n), clip, dtype=np.int64)
    mask = np.full((b, n, n), NEG_INF, dtype=np.float64)
    pad = np.ones((b, n), dtype=bool)
    fwd = np.zeros((b, n))
    mar = np.zeros((b, n))
    bwd = np.zeros((b, n))
    diag = np.arange(n)
    for r, f in enumerate(feats):
        k = f.n
        tokens[r, :k] = f.token_ids
        rel[r, :k, :k] = f.rel_index
        mask[r, :k, :k] = f.mask
        mask[r, diag[k:], diag[k:]] = 0.0
        pad[r, :k] = False
        if f.forward is not None:
            fwd[r, :k] = f.forward
            mar[r, :k] = f.marginal
            bwd[r, :k] = f.backward
    return EncoderInput(
        torch.from_numpy(tokens), torch.from_numpy(rel), torch.from_numpy(mask).to(DTYPE),
        torch.from_numpy(pad), torch.from_numpy(fwd).to(DTYPE), torch.from_numpy(mar).to(DTYPE),
        torch.from_numpy(bwd).to(DTYPE), use_scores,
    )
