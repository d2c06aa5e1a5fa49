import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmne.dataset import from_raw_labels
from lmne.neighborhood import (
    NeighborhoodIndex, build_index, graph_weights, load_neighbors, save_neighbors, symmetrize,
)
from lmne.similarity import SimilarityModel
from lmne.dataset import FormatError

from conftest import random_dataset


def brute_force_knn(x, k):
    # Oracle: full distance table, sort by (distance, index).
    n = len(x)
    out = []
    for i in range(n):
        d = [(float(np.sum((x[i] - x[j]) ** 2)), j) for j in range(n) if j != i]
        out.append([j for _, j in sorted(d)[:k]])
    return np.array(out)


def three_points():
    return from_raw_labels(np.array([[0.0], [1.0], [10.0]]), [1, 1, 2])


def test_three_point_example():
    index = build_index(three_points(), 1)
    assert index.neighbors.tolist() == [[1], [0], [1]]
    assert index.targets(0).tolist() == [1] and index.imposters(0).tolist() == []
    assert index.imposters(2).tolist() == [1]
    pairs = symmetrize(index)
    assert pairs.targets[0].tolist() == [1]
    assert pairs.imposters[1].tolist() == [2]
    assert pairs.imposters[2].tolist() == [1]
    assert pairs.targets[2].tolist() == []


def test_complete_neighborhood(rng):
    data = random_dataset(rng, 12, 3, 2)
    index = build_index(data, 11)
    for i in range(12):
        assert sorted(index.neighbors[i]) == [j for j in range(12) if j != i]


def test_ties_go_to_lower_index():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    index = build_index(from_raw_labels(x, [1, 1, 2, 2]), 2)
    assert index.neighbors[0].tolist() == [1, 2]


def test_k_clamped_with_warning(rng):
    data = random_dataset(rng, 5, 2, 2)
    with pytest.warns(UserWarning, match="clamped"):
        index = build_index(data, 9)
    assert index.k == 4


def test_rejects_bad_k(rng):
    with pytest.raises(ValueError):
        build_index(random_dataset(rng, 5, 2, 2), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 120), st.integers(1, 12), st.integers(0, 2**31))
def test_matches_brute_force(n, k, seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, n, 3, min(3, n))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        index = build_index(data, k)
    np.testing.assert_array_equal(index.neighbors, brute_force_knn(data.features, min(k, n - 1)))


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 80), st.integers(1, 10), st.integers(0, 2**31))
def test_index_and_pair_invariants(n, k, seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, n, 4, 3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        index = build_index(data, k)
    pairs = symmetrize(index)
    for i in range(n):
        row = set(index.neighbors[i].tolist())
        tgt, imp = set(index.targets(i).tolist()), set(index.imposters(i).tolist())
        assert i not in row and len(row) == min(k, n - 1)
        assert tgt.isdisjoint(imp) and tgt | imp == row
        pt, pi = set(pairs.targets[i].tolist()), set(pairs.imposters[i].tolist())
        assert pt.isdisjoint(pi)
        for j in pt:
            assert i in pairs.targets[j]
        for j in pi:
            assert i in pairs.imposters[j]
    assert pairs.triplet_count() <= 4 * n * k * k


def test_reverse_membership_added():
    # 0 and 1 are mutual neighbors, 2 is far and only points at 1.
    x = np.array([[0.0], [1.0], [5.0]])
    pairs = symmetrize(build_index(from_raw_labels(x, [1, 1, 1]), 1))
    assert pairs.targets[1].tolist() == [0, 2]
    assert pairs.targets[2].tolist() == [1]


def test_graph_weights_counts():
    # Complete neighborhoods over six samples: anchor 0 ends up with
    # targets {1, 2} and imposters {3, 4, 5}.
    neighbors = np.array([[j for j in range(6) if j != i] for i in range(6)])
    pairs = symmetrize(NeighborhoodIndex(neighbors, np.array([1, 1, 1, 2, 2, 2])))
    assert (len(pairs.targets[0]), len(pairs.imposters[0])) == (2, 3)
    w = graph_weights(pairs).toarray()
    assert w[0, 1] == w[0, 2] == -3
    assert w[0, 3] == w[0, 4] == w[0, 5] == 2
    assert w[0, 0] == 0


def test_graph_weights_empty_cases():
    pairs = symmetrize(build_index(from_raw_labels(np.array([[0.0], [1.0], [2.0]]), [1, 1, 1]), 2))
    assert graph_weights(pairs).nnz == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(5, 100), st.integers(1, 10), st.integers(0, 2**31))
def test_weighted_graph_equals_triplet_sum(n, k, seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, n, 4, 3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pairs = symmetrize(build_index(data, k))
    m = SimilarityModel(rng.standard_normal((4, 4)))
    s = data.features @ m.M @ data.features.T
    w = graph_weights(pairs).tocoo()
    weighted = float(sum(v * s[i, j] for i, j, v in zip(w.row, w.col, w.data)))
    triplets = 0.0
    for i in range(n):
        for j in pairs.targets[i]:
            for l in pairs.imposters[i]:
                triplets += -s[i, j] + s[i, l]
    assert weighted == pytest.approx(triplets, rel=1e-9, abs=1e-9)


def test_neighbor_file_round_trip(tmp_path, small_problem):
    data, index, _ = small_problem
    save_neighbors(index, tmp_path / "n.msn")
    raw = (tmp_path / "n.msn").read_bytes()
    assert raw[:4] == b"MSN1" and len(raw) == 4 + 16 + 4 * data.n * index.k
    back = load_neighbors(tmp_path / "n.msn", data.labels)
    np.testing.assert_array_equal(back.neighbors, index.neighbors)


def test_neighbor_file_size_mismatch(tmp_path, small_problem):
    data, index, _ = small_problem
    save_neighbors(index, tmp_path / "n.msn")
    with pytest.raises(FormatError):
        load_neighbors(tmp_path / "n.msn", data.labels[:-1])
