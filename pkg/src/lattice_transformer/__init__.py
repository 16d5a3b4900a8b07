"""Lattice transformer: attention over word lattices with posterior scores."""

__version__ = "0.1.0"

from .lattice import Lattice, LatticeError, Node, enumerate_paths, from_sequence, validate
from .position import LatticeMatrix, build_lattice_matrix, clip_and_split, embedding_indices, lattice_matrix
from .scores import ScoreSet, backward_scores, compute_scores, marginal_scores, oracle_marginal

__all__ = [
    "Lattice", "LatticeError", "Node", "enumerate_paths", "from_sequence", "validate",
    "LatticeMatrix", "build_lattice_matrix", "clip_and_split", "embedding_indices", "lattice_matrix",
    "ScoreSet", "backward_scores", "compute_scores", "marginal_scores", "oracle_marginal",
]
