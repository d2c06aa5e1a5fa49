"""Seeded synthetic sets with coarse and fine-grained class structure.

Classes come in coarse pairs.  The pairs sit far apart, while the two
classes inside a pair differ only by a small shift along one direction.
A few high-variance nuisance directions shared by all classes dominate
Euclidean distance, so Euclidean neighbors mix fine-grained classes heavily
even though a suitable linear reweighting separates them.
"""

from __future__ import annotations

import numpy as np

from .dataset import LabeledDataset, fit_pca, apply_preprocessing, from_raw_labels


def fine_grained(
    n_per_class: int,
    dim: int = 50,
    n_pairs: int = 2,
    coarse_sep: float = 6.0,
    fine_shift: float = 1.0,
    noise: float = 0.3,
    nuisance_dims: int = 5,
    nuisance_scale: float = 2.5,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Draw ``2 * n_pairs`` classes of ``n_per_class`` samples each.

    Returns ``(features, labels, geometry)``; labels run ``1..2*n_pairs``
    and ``geometry`` holds the class means.  Class means depend only on
    ``seed``, not on ``n_per_class``.
    """
    if dim < 2 * n_pairs + nuisance_dims:
        raise ValueError(f"dim={dim} too small for {n_pairs} coarse pairs")
    geo_rng = np.random.default_rng([seed, 1])
    q, _ = np.linalg.qr(geo_rng.standard_normal((dim, 2 * n_pairs + nuisance_dims)))
    nuisance = q[:, 2 * n_pairs:]
    means = []
    for p in range(n_pairs):
        center, axis = coarse_sep * q[:, 2 * p], q[:, 2 * p + 1]
        means += [center + 0.5 * fine_shift * axis, center - 0.5 * fine_shift * axis]
    means = np.array(means)
    rng = np.random.default_rng([seed, 2])
    labels = np.repeat(np.arange(1, len(means) + 1), n_per_class)
    features = means[labels - 1] + noise * rng.standard_normal((len(labels), dim))
    features += nuisance_scale * rng.standard_normal((len(labels), nuisance_dims)) @ nuisance.T
    return features, labels, {"means": means, "nuisance": nuisance}


def train_test_split(
    n_train: int, n_test: int, dim: int = 50, seed: int = 0, preprocess: bool = True, **kw
) -> tuple[LabeledDataset, LabeledDataset]:
    """Independent train and test draws from the same class geometry.

    With ``preprocess`` both are mapped through a full-dimension PCA fitted on
    the training split and normalized to unit length.
    """
    x, y, _ = fine_grained(n_train + n_test, dim=dim, seed=seed, **kw)
    n_classes = y.max()
    per = n_train + n_test
    train_rows = np.concatenate([np.arange(c * per, c * per + n_train) for c in range(n_classes)])
    test_rows = np.concatenate([np.arange(c * per + n_train, (c + 1) * per) for c in range(n_classes)])
    train = from_raw_labels(x[train_rows], y[train_rows])
    test = from_raw_labels(x[test_rows], y[test_rows])
    if preprocess:
        pca = fit_pca(train, dim)
        train, test = apply_preprocessing(train, pca), apply_preprocessing(test, pca)
    return train, test
