"""Exact Euclidean k-nearest-neighbor sets and the target/imposter split.

Neighborhoods are computed once and stay fixed while a similarity is learned.
The on-disk layout (``MSN1``) is::

    b"MSN1" | u64 N | u64 k | N*k x u32 neighbor indices (row-major)
"""

from __future__ import annotations

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from .dataset import FormatError, LabeledDataset, _expect_eof, _read_array, _read_header

NEIGHBOR_MAGIC = b"MSN1"

_BLOCK_ROWS = 256


@dataclass(frozen=True)
class NeighborhoodIndex:
    """Per-sample neighbor lists, nearest first, self excluded."""

    neighbors: np.ndarray  # (N, k) int
    labels: np.ndarray

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    def targets(self, i: int) -> np.ndarray:
        row = self.neighbors[i]
        return row[self.labels[row] == self.labels[i]]

    def imposters(self, i: int) -> np.ndarray:
        row = self.neighbors[i]
        return row[self.labels[row] != self.labels[i]]


@dataclass(frozen=True)
class SymmetricPairSets:
    """Target and imposter sets closed under the reverse-neighbor relation.

    ``targets[i]`` is ``{j : j in N_i+ or i in N_j+}`` and ``imposters[i]``
    likewise for different-class neighbors.  Both are sorted index arrays.
    """

    targets: list
    imposters: list

    @property
    def n(self) -> int:
        return len(self.targets)

    @property
    def usable(self) -> np.ndarray:
        """Samples that have at least one target and one imposter."""
        return np.array(
            [len(t) > 0 and len(m) > 0 for t, m in zip(self.targets, self.imposters)],
            dtype=bool,
        )

    def triplet_count(self) -> int:
        return int(sum(len(t) * len(m) for t, m in zip(self.targets, self.imposters)))


def _knn_block(x: np.ndarray, rows: np.ndarray, k: int) -> np.ndarray:
    dist = cdist(x[rows], x, metric="sqeuclidean")
    dist[np.arange(len(rows)), rows] = np.inf
    # A stable sort keeps ties in ascending index order.
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def nearest_indices(
    queries: np.ndarray, base: np.ndarray, k: int, jobs: int = 1
) -> np.ndarray:
    """Exact k nearest ``base`` rows for each query; ties go to the lower index."""
    k = min(k, base.shape[0])
    blocks = [np.arange(s, min(s + _BLOCK_ROWS, len(queries)))
              for s in range(0, len(queries), _BLOCK_ROWS)]

    def run(rows):
        dist = cdist(queries[rows], base, metric="sqeuclidean")
        return np.argsort(dist, axis=1, kind="stable")[:, :k]

    if not blocks:
        return np.zeros((0, k), dtype=np.int64)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return np.vstack(list(pool.map(run, blocks)))


def build_index(data: LabeledDataset, k: int, jobs: int = 1) -> NeighborhoodIndex:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if data.n < 2:
        raise ValueError("need at least two samples to build neighborhoods")
    if k >= data.n:
        warnings.warn(f"k={k} >= N={data.n}; clamped to {data.n - 1}", stacklevel=2)
        k = data.n - 1
    x = data.features
    blocks = [np.arange(s, min(s + _BLOCK_ROWS, data.n))
              for s in range(0, data.n, _BLOCK_ROWS)]
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        parts = list(pool.map(lambda rows: _knn_block(x, rows, k), blocks))
    neighbors = np.vstack(parts).astype(np.int64)
    neighbors.setflags(write=False)
    return NeighborhoodIndex(neighbors, data.labels)


def symmetrize(index: NeighborhoodIndex) -> SymmetricPairSets:
    n = index.n
    targets = [set() for _ in range(n)]
    imposters = [set() for _ in range(n)]
    for i in range(n):
        for j in index.neighbors[i]:
            j = int(j)
            if index.labels[j] == index.labels[i]:
                targets[i].add(j)
                targets[j].add(i)
            else:
                imposters[i].add(j)
                imposters[j].add(i)
    as_arrays = lambda sets: [np.array(sorted(s), dtype=np.int64) for s in sets]
    return SymmetricPairSets(as_arrays(targets), as_arrays(imposters))


def graph_weights(pairs: SymmetricPairSets) -> sparse.csr_matrix:
    """Integer edge weights of the neighborhood graph.

    Row ``i`` holds ``-|imposters(i)|`` at each target and ``+|targets(i)|``
    at each imposter; zero weights are not stored.
    """
    rows, cols, vals = [], [], []
    for i, (tgt, imp) in enumerate(zip(pairs.targets, pairs.imposters)):
        if len(imp):
            rows.extend([i] * len(tgt))
            cols.extend(tgt.tolist())
            vals.extend([-len(imp)] * len(tgt))
        if len(tgt):
            rows.extend([i] * len(imp))
            cols.extend(imp.tolist())
            vals.extend([len(tgt)] * len(imp))
    n = pairs.n
    w = sparse.csr_matrix(
        (np.array(vals, dtype=np.int64), (np.array(rows, dtype=np.int64),
                                          np.array(cols, dtype=np.int64))),
        shape=(n, n),
    )
    w.eliminate_zeros()
    return w


def save_neighbors(index: NeighborhoodIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(NEIGHBOR_MAGIC)
        fh.write(struct.pack("<QQ", index.n, index.k))
        fh.write(np.ascontiguousarray(index.neighbors, dtype="<u4").tobytes())


def load_neighbors(path, labels) -> NeighborhoodIndex:
    labels = np.asarray(labels)
    with open(path, "rb") as fh:
        n, k = _read_header(fh, NEIGHBOR_MAGIC, 2, path)
        neighbors = _read_array(fh, "<u4", n * k, path).astype(np.int64).reshape(n, k)
        _expect_eof(fh, path)
    if n != len(labels):
        raise FormatError(f"{path}: index covers N={n} samples, dataset has {len(labels)}")
    if n and (neighbors.max(initial=0) >= n or np.any(neighbors == np.arange(n)[:, None])):
        raise FormatError(f"{path}: neighbor index out of range or self-reference")
    return NeighborhoodIndex(neighbors, labels)
