"""Labeled feature data: loading, saving, PCA and length normalization.

Two on-disk formats are supported for features. The binary ``MSF1`` layout is::

    b"MSF1" | u64 N | u64 D | N x u32 labels | N*D x f32 features (row-major)

and the CSV layout is one sample per row with the integer label first.
A fitted PCA is stored as ``MSP1``::

    b"MSP1" | u64 D | u64 D' | D' x f32 mean | D*D' x f32 basis (row-major)

All integers are little-endian.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"MSF1"
PCA_MAGIC = b"MSP1"

# Rows whose norm falls below this after projection are treated as zero.
ZERO_NORM = 1e-12
# Rows already this close to unit length are left untouched, which makes
# normalization exactly idempotent.
UNIT_NORM_TOL = 1e-12

# Covariance is built from the full data up to this input dimension.
FULL_COVARIANCE_MAX_DIM = 2000


class FormatError(ValueError):
    """Raised for malformed feature, PCA, model or neighborhood files."""


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix with contiguous class labels ``1..C``.

    ``classes[c - 1]`` holds the original id of remapped label ``c``.
    ``flagged`` marks rows that were zero after projection; they are kept in
    place so indices stay aligned but are never used as training anchors.
    """

    features: np.ndarray
    labels: np.ndarray
    classes: np.ndarray
    flagged: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ValueError(
                f"{labels.shape[0]} labels for {features.shape[0]} feature rows"
            )
        flagged = self.flagged
        if flagged is None:
            flagged = np.zeros(features.shape[0], dtype=bool)
        flagged = np.asarray(flagged, dtype=bool)
        features.setflags(write=False)
        labels.setflags(write=False)
        flagged.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "classes", np.asarray(self.classes, dtype=np.int64))
        object.__setattr__(self, "flagged", flagged)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def original_labels(self) -> np.ndarray:
        return self.classes[self.labels - 1]

    def with_features(self, features: np.ndarray, flagged=None) -> "LabeledDataset":
        return LabeledDataset(
            features, self.labels, self.classes,
            self.flagged if flagged is None else flagged,
        )

    def subset(self, rows) -> "LabeledDataset":
        rows = np.asarray(rows)
        return LabeledDataset(
            self.features[rows], self.labels[rows], self.classes, self.flagged[rows]
        )


@dataclass(frozen=True)
class PcaTransform:
    """Mean and orthonormal principal directions, strongest first.

    ``basis`` has shape ``(target_dim, input_dim)``.
    """

    mean: np.ndarray
    basis: np.ndarray
    explained_variance: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.basis.T

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.basis + self.mean


def from_raw_labels(features, raw_labels) -> LabeledDataset:
    """Build a dataset, remapping arbitrary integer labels to ``1..C``.

    Original ids are kept in ascending order, so the remap is deterministic.
    """
    raw = np.asarray(raw_labels, dtype=np.int64)
    classes, labels = np.unique(raw, return_inverse=True)
    return LabeledDataset(np.asarray(features, dtype=np.float64), labels + 1, classes)


def load_dataset(path, format: str | None = None) -> LabeledDataset:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "binary"
    if format == "csv":
        return _load_csv(path)
    if format == "binary":
        return _load_binary(path)
    raise ValueError(f"unknown dataset format {format!r}")


def _load_csv(path: Path) -> LabeledDataset:
    labels, rows = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or all(not f.strip() for f in record):
                continue
            if width is None:
                width = len(record)
                if width < 2:
                    raise FormatError(f"{path}:{lineno}: need a label and at least one feature")
            elif len(record) != width:
                raise FormatError(
                    f"{path}:{lineno}: row-length mismatch, expected {width - 1} "
                    f"features, got {len(record) - 1}"
                )
            try:
                labels.append(int(record[0]))
                rows.append([float(v) for v in record[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no samples")
    return from_raw_labels(np.array(rows), labels)


def _read_header(fh, magic: bytes, n_fields: int, path) -> tuple[int, ...]:
    got = fh.read(4)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    raw = fh.read(8 * n_fields)
    if len(raw) != 8 * n_fields:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack(f"<{n_fields}Q", raw)


def _read_array(fh, dtype, count: int, path) -> np.ndarray:
    dtype = np.dtype(dtype)
    raw = fh.read(dtype.itemsize * count)
    if len(raw) != dtype.itemsize * count:
        raise FormatError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype=dtype, count=count)


def _expect_eof(fh, path) -> None:
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after payload")


def _load_binary(path: Path) -> LabeledDataset:
    with open(path, "rb") as fh:
        n, d = _read_header(fh, FEATURE_MAGIC, 2, path)
        if n == 0 or d == 0:
            raise FormatError(f"{path}: empty dataset (N={n}, D={d})")
        labels = _read_array(fh, "<u4", n, path)
        features = _read_array(fh, "<f4", n * d, path).reshape(n, d)
        _expect_eof(fh, path)
    return from_raw_labels(features.astype(np.float64), labels.astype(np.int64))


def save_dataset(data: LabeledDataset, path, format: str | None = None) -> None:
    """Write ``data`` with its original class ids."""
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "binary"
    raw = data.original_labels
    if format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for label, row in zip(raw, data.features):
                writer.writerow([int(label)] + [repr(float(v)) for v in row])
        return
    if format != "binary":
        raise ValueError(f"unknown dataset format {format!r}")
    if raw.min() < 0 or raw.max() > np.iinfo(np.uint32).max:
        raise ValueError("class ids must fit in u32 for the binary format")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", data.n, data.dim))
        fh.write(raw.astype("<u4").tobytes())
        fh.write(np.ascontiguousarray(data.features, dtype="<f4").tobytes())


def fit_pca(
    data: LabeledDataset | np.ndarray,
    target_dim: int,
    subset_size: int = 10_000,
    seed: int = 0,
) -> PcaTransform:
    """Fit the top ``target_dim`` principal directions.

    Above ``FULL_COVARIANCE_MAX_DIM`` input dimensions the covariance is
    estimated from at most ``subset_size`` uniformly drawn rows.  Each
    direction is signed so its largest-magnitude component is positive.
    """
    x = data.features if isinstance(data, LabeledDataset) else np.asarray(data, float)
    n, dim = x.shape
    if target_dim < 1 or target_dim > min(n, dim):
        raise ValueError(
            f"target_dim={target_dim} outside [1, min(N, D)] = [1, {min(n, dim)}]"
        )
    mean = x.mean(axis=0)
    sample = x
    if dim > FULL_COVARIANCE_MAX_DIM and n > subset_size:
        rows = np.sort(np.random.default_rng(seed).choice(n, subset_size, replace=False))
        sample = x[rows]
    centered = sample - mean
    cov = centered.T @ centered / max(len(sample) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:target_dim]
    basis = evecs[:, order].T
    pivot = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(target_dim), pivot])
    basis = basis * signs[:, None]
    variance = np.clip(evals[order], 0.0, None)
    return PcaTransform(mean, np.ascontiguousarray(basis), variance)


def identity_pca(dim: int) -> PcaTransform:
    return PcaTransform(np.zeros(dim), np.eye(dim), np.ones(dim))


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale rows to unit length; return ``(normalized, zero_mask)``.

    Zero rows stay zero.  Rows already at unit length are returned unchanged.
    """
    x = np.array(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = norms < ZERO_NORM
    scale = ~zero & (np.abs(norms - 1.0) > UNIT_NORM_TOL)
    x[scale] /= norms[scale, None]
    x[zero] = 0.0
    return x, zero


def apply_preprocessing(data: LabeledDataset, pca: PcaTransform) -> LabeledDataset:
    """Center, project onto the PCA basis, then normalize each row.

    Rows that project to zero are kept as zero vectors and flagged.
    """
    if data.dim != pca.input_dim:
        raise ValueError(
            f"dimension mismatch: data has D={data.dim}, PCA expects {pca.input_dim}"
        )
    projected, zero = normalize_rows(pca.project(data.features))
    return data.with_features(projected, flagged=data.flagged | zero)


def save_pca(pca: PcaTransform, path) -> None:
    with open(path, "wb") as fh:
        fh.write(PCA_MAGIC)
        fh.write(struct.pack("<QQ", pca.output_dim, pca.input_dim))
        fh.write(np.ascontiguousarray(pca.mean, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(pca.basis, dtype="<f4").tobytes())


def load_pca(path) -> PcaTransform:
    with open(path, "rb") as fh:
        out_dim, in_dim = _read_header(fh, PCA_MAGIC, 2, path)
        mean = _read_array(fh, "<f4", in_dim, path).astype(np.float64)
        basis = _read_array(fh, "<f4", out_dim * in_dim, path).astype(np.float64)
        _expect_eof(fh, path)
    # Explained variance is not part of the file format.
    return PcaTransform(mean, basis.reshape(out_dim, in_dim), np.full(out_dim, np.nan))
