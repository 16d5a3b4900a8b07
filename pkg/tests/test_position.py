import numpy as np
import pytest

from lattice_transformer.lattice import enumerate_paths, from_sequence, make_lattice
from lattice_transformer.position import (
    NEG_INF,
    build_lattice_matrix,
    clip,
    clip_and_split,
    embedding_indices,
    lattice_matrix,
    sequence_matrix,
)
from helpers import brute_force_matrix, diamond, random_lattices

DIAMOND_L = [[0, -1, -1, -2], [1, 0, None, -1], [1, None, 0, -1], [2, 1, 1, 0]]


def skew():
    # <s> -> a -> </s>  and  <s> -> b -> c -> </s>
    return make_lattice(["<s>", "a", "b", "c", "</s>"], [(0, 1), (0, 2), (1, 4), (2, 3), (3, 4)],
                        [1.0, 0.5, 0.5, 1.0, 1.0])


def test_diamond_matrix():
    assert lattice_matrix(diamond()) == DIAMOND_L


def test_chain_matrix():
    n = 6
    raw = lattice_matrix(from_sequence(list("abcd")))
    assert raw == [[i - j for j in range(n)] for i in range(n)]


def test_unequal_paths():
    raw = lattice_matrix(skew())
    assert raw[4][0] == 2
    assert raw[0][4] == -3
    assert raw == brute_force_matrix(skew(), enumerate_paths(skew()))


def test_max_variant():
    raw = lattice_matrix(skew(), reduce="max")
    assert raw[4][0] == 3 and raw[0][4] == -2
    assert raw == brute_force_matrix(skew(), enumerate_paths(skew()), reduce=max)


def test_clip_footnote_values():
    assert clip(5, 3) == 3
    assert clip(-7, 3) == -3
    lm = clip_and_split([[0, 5], [-7, None]], 3)
    assert lm.regular.tolist() == [[0, 3], [-3, 0]]
    assert lm.mask.tolist() == [[0.0, 0.0], [0.0, NEG_INF]]
    with pytest.raises(ValueError):
        clip_and_split([[0]], 0)


def test_embedding_indices():
    lm = build_lattice_matrix(diamond(), 2)
    idx = embedding_indices(lm, 2)
    assert idx.tolist() == [[2, 1, 1, 0], [3, 2, 2, 1], [3, 2, 2, 1], [4, 3, 3, 2]]
    assert lm.mask[1, 2] == NEG_INF and lm.mask[2, 1] == NEG_INF
    lm4 = build_lattice_matrix(from_sequence(["x"]), 4)
    assert embedding_indices(lm4)[1, 1] == 4
    lm1 = build_lattice_matrix(from_sequence(list("abcde")), 1)
    assert embedding_indices(lm1).min() == 0 and embedding_indices(lm1).max() == 2


def test_dp_matches_path_oracle():
    for lat in random_lattices(21, 200, 4, 12):
        paths = enumerate_paths(lat)
        assert lattice_matrix(lat) == brute_force_matrix(lat, paths)
        assert lattice_matrix(lat, "max") == brute_force_matrix(lat, paths, reduce=max)


def test_unit_entries_reconstruct_edges():
    for lat in random_lattices(22, 100):
        raw = lattice_matrix(lat)
        ones = {(j, i) for i, row in enumerate(raw) for j, v in enumerate(row) if v == 1}
        assert ones == set(lat.edges)


def test_mask_symmetry_and_range():
    for lat in random_lattices(23, 100):
        lm = build_lattice_matrix(lat, 3)
        np.testing.assert_array_equal(lm.mask, lm.mask.T)
        assert np.all(np.diag(lm.mask) == 0)
        assert lm.regular.min() >= -3 and lm.regular.max() <= 3
        assert np.all(lm.regular[lm.mask < 0] == 0)


def test_chain_reduces_to_sequence_positions():
    for n in range(1, 20):
        lm = build_lattice_matrix(from_sequence(["w"] * n), 5)
        ref = sequence_matrix(n + 2, 5)
        np.testing.assert_array_equal(lm.regular, ref.regular)
        assert not lm.mask.any()
