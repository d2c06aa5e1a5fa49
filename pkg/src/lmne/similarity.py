"""Bilinear similarity, the large-margin triplet objective, and ensembles.

Model files::

    MSM1: b"MSM1" | u64 D | D*D x f32 M (row-major)
    MSE1: b"MSE1" | u64 N_E | u64 d | u64 D | per member: d*D f32 P, d*d f32 M
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .dataset import FormatError, LabeledDataset, _expect_eof, _read_array, _read_header

MODEL_MAGIC = b"MSM1"
ENSEMBLE_MAGIC = b"MSE1"


@dataclass(frozen=True)
class SimilarityModel:
    """``s(x, z) = x^T M z`` for a square matrix ``M``."""

    M: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.M, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"M must be square, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("M has non-finite entries")
        object.__setattr__(self, "M", m)

    @classmethod
    def identity(cls, dim: int) -> "SimilarityModel":
        return cls(np.eye(dim))

    @property
    def dim(self) -> int:
        return self.M.shape[0]

    @property
    def frob_target(self) -> float:
        """Frobenius norm kept by renormalization: that of the identity."""
        return float(np.sqrt(self.dim))


@dataclass(frozen=True)
class EnsembleModel:
    """Sum of bilinear similarities in projected subspaces.

    ``projections[n]`` is ``d x D`` and ``models[n]`` is ``d x d``.
    """

    projections: tuple
    models: tuple

    def __post_init__(self):
        projections = tuple(np.asarray(p, dtype=np.float64) for p in self.projections)
        models = tuple(np.asarray(m, dtype=np.float64) for m in self.models)
        if not projections:
            raise ValueError("an ensemble needs at least one member")
        if len(projections) != len(models):
            raise ValueError("projection and model counts differ")
        d, dim = projections[0].shape
        for n, (p, m) in enumerate(zip(projections, models)):
            if p.shape != (d, dim):
                raise ValueError(f"member {n}: projection shape {p.shape} != {(d, dim)}")
            if m.shape != (d, d):
                raise ValueError(f"member {n}: model shape {m.shape} != {(d, d)}")
        object.__setattr__(self, "projections", projections)
        object.__setattr__(self, "models", models)

    @property
    def size(self) -> int:
        return len(self.models)

    @property
    def d(self) -> int:
        return self.projections[0].shape[0]

    @property
    def dim(self) -> int:
        return self.projections[0].shape[1]

    def replace(self, n: int, M: np.ndarray) -> "EnsembleModel":
        models = list(self.models)
        models[n] = M
        return EnsembleModel(self.projections, tuple(models))


Similarity = Union[SimilarityModel, EnsembleModel]


def _check_vec(x, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise ValueError(f"{name} has shape {x.shape}, expected ({dim},)")
    return x


def similarity(model: SimilarityModel, x, z) -> float:
    x = _check_vec(x, model.dim, "x")
    z = _check_vec(z, model.dim, "z")
    return float(x @ model.M @ z)


def ensemble_similarity(ens: EnsembleModel, x, z) -> float:
    x = _check_vec(x, ens.dim, "x")
    z = _check_vec(z, ens.dim, "z")
    total = 0.0
    for p, m in zip(ens.projections, ens.models):
        total += float((p @ x) @ m @ (p @ z))
    return total


def collapse_ensemble(ens: EnsembleModel) -> SimilarityModel:
    """Fold an ensemble into the single matrix ``sum_n P_n^T M_n P_n``."""
    total = np.zeros((ens.dim, ens.dim))
    for p, m in zip(ens.projections, ens.models):
        total += p.T @ m @ p
    return SimilarityModel(total)


def similarity_matrix(sim: Similarity, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All pairwise similarities between rows of ``a`` and rows of ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if isinstance(sim, EnsembleModel):
        if a.shape[1] != sim.dim or b.shape[1] != sim.dim:
            raise ValueError(f"feature dimension does not match ensemble D={sim.dim}")
        out = np.zeros((a.shape[0], b.shape[0]))
        for p, m in zip(sim.projections, sim.models):
            out += (a @ p.T) @ m @ (b @ p.T).T
        return out
    if a.shape[1] != sim.dim or b.shape[1] != sim.dim:
        raise ValueError(f"feature dimension does not match model D={sim.dim}")
    return a @ sim.M @ b.T


def hinge(value):
    return np.maximum(value, 0.0)


def triplet_loss(model: SimilarityModel, x_i, x_j, x_l, b: float) -> float:
    """``[b - s(x_i, x_j) + s(x_i, x_l)]_+``."""
    if b <= 0:
        raise ValueError(f"margin must be positive, got {b}")
    return float(hinge(b - similarity(model, x_i, x_j) + similarity(model, x_i, x_l)))


def triplet_subgradient(model: SimilarityModel, x_i, x_j, x_l, b: float) -> np.ndarray:
    """Subgradient of :func:`triplet_loss` with respect to ``M``.

    The hinge counts as active on its kink (margin exactly met).
    """
    x_i, x_j, x_l = (np.asarray(v, dtype=np.float64) for v in (x_i, x_j, x_l))
    if b - similarity(model, x_i, x_j) + similarity(model, x_i, x_l) >= 0:
        return -np.outer(x_i, x_j - x_l)
    return np.zeros_like(model.M)


def objective(
    sim: Similarity,
    data: LabeledDataset | np.ndarray,
    pairs,
    b: float,
    anchors: Sequence[int] | None = None,
) -> float:
    """Sum of triplet hinge losses over every anchor's target x imposter pairs.

    Pass ``anchors`` to restrict the sum to a subsample of anchors.
    """
    x = data.features if isinstance(data, LabeledDataset) else np.asarray(data, float)
    if isinstance(sim, EnsembleModel):
        sim = collapse_ensemble(sim)
    if anchors is None:
        anchors = range(pairs.n)
    total = 0.0
    for i in anchors:
        tgt, imp = pairs.targets[i], pairs.imposters[i]
        if len(tgt) == 0 or len(imp) == 0:
            continue
        u = x[i] @ sim.M
        s_t = x[tgt] @ u
        s_l = x[imp] @ u
        total += float(hinge(b - s_t[:, None] + s_l[None, :]).sum())
    return total


def save_model(model: SimilarityModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<Q", model.dim))
        fh.write(np.ascontiguousarray(model.M, dtype="<f4").tobytes())


def load_model(path) -> SimilarityModel:
    with open(path, "rb") as fh:
        (dim,) = _read_header(fh, MODEL_MAGIC, 1, path)
        m = _read_array(fh, "<f4", dim * dim, path).astype(np.float64)
        _expect_eof(fh, path)
    return SimilarityModel(m.reshape(dim, dim))


def save_ensemble(ens: EnsembleModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(ENSEMBLE_MAGIC)
        fh.write(struct.pack("<QQQ", ens.size, ens.d, ens.dim))
        for p, m in zip(ens.projections, ens.models):
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_ensemble(path) -> EnsembleModel:
    projections, models = [], []
    with open(path, "rb") as fh:
        size, d, dim = _read_header(fh, ENSEMBLE_MAGIC, 3, path)
        if size == 0:
            raise FormatError(f"{path}: ensemble with no members")
        for _ in range(size):
            projections.append(_read_array(fh, "<f4", d * dim, path).reshape(d, dim))
            models.append(_read_array(fh, "<f4", d * d, path).reshape(d, d))
        _expect_eof(fh, path)
    return EnsembleModel(
        tuple(p.astype(np.float64) for p in projections),
        tuple(m.astype(np.float64) for m in models),
    )


def load_similarity(path) -> Similarity:
    """Load either model format, dispatching on the magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == MODEL_MAGIC:
        return load_model(path)
    if magic == ENSEMBLE_MAGIC:
        return load_ensemble(path)
    raise FormatError(f"{path}: not a model or ensemble file (magic {magic!r})")
