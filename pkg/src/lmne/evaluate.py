"""Soft-voting kNN prediction and the accuracy / precision-recall suite.

Voters for a test sample are its Euclidean nearest training samples; each
voter adds its learned similarity to the score of its class.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import LabeledDataset
from .neighborhood import nearest_indices
from .similarity import Similarity, similarity_matrix


@dataclass(frozen=True)
class Prediction:
    """Class scores of one test sample.

    ``scores[c - 1]`` is the summed vote for class ``c``; classes without a
    voter hold ``-inf`` so they rank after every voted class.
    """

    scores: np.ndarray

    @property
    def label(self) -> int:
        # argmax returns the first maximum, i.e. the smaller class id.
        return int(np.argmax(self.scores)) + 1

    def ranking(self) -> np.ndarray:
        """Class ids best first; equal scores ordered by class id."""
        return np.argsort(-self.scores, kind="stable") + 1


@dataclass(frozen=True)
class PrCurve:
    cutoffs: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


def _vote(labels: np.ndarray, weights: np.ndarray, n_classes: int) -> Prediction:
    scores = np.full(n_classes, -np.inf)
    present = np.unique(labels)
    scores[present - 1] = 0.0
    np.add.at(scores, labels - 1, weights)
    return Prediction(scores)


def _as_matrix(x) -> np.ndarray:
    x = x.features if isinstance(x, LabeledDataset) else np.asarray(x, dtype=np.float64)
    return np.atleast_2d(x)


def predict_batch(
    test, train: LabeledDataset, sim: Similarity, k_vote: int, jobs: int = 1
) -> list:
    if k_vote < 1:
        raise ValueError(f"k_vote must be >= 1, got {k_vote}")
    xt = _as_matrix(test)
    if xt.shape[1] != train.dim:
        raise ValueError(f"test dimension {xt.shape[1]} != training dimension {train.dim}")
    voters = nearest_indices(xt, train.features, k_vote, jobs)
    out = []
    for t, rows in enumerate(voters):
        weights = similarity_matrix(sim, xt[t], train.features[rows])[0]
        out.append(_vote(train.labels[rows], weights, train.n_classes))
    return out


def predict(x_t, train: LabeledDataset, sim: Similarity, k_vote: int) -> Prediction:
    return predict_batch(np.asarray(x_t)[None, :], train, sim, k_vote)[0]


def euclidean_knn_baseline(test, train: LabeledDataset, k_vote: int) -> list:
    """Unweighted majority vote over the Euclidean neighbors."""
    if k_vote < 1:
        raise ValueError(f"k_vote must be >= 1, got {k_vote}")
    xt = _as_matrix(test)
    voters = nearest_indices(xt, train.features, k_vote)
    return [_vote(train.labels[rows], np.ones(len(rows)), train.n_classes) for rows in voters]


def top_n_accuracy(predictions: Sequence[Prediction], truth, n: int = 1) -> float:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    truth = np.asarray(truth)
    if len(truth) != len(predictions):
        raise ValueError("one true label per prediction is required")
    if len(truth) == 0:
        return 0.0
    hits = [int(y) in p.ranking()[:n] for p, y in zip(predictions, truth)]
    return float(np.mean(hits))


def accuracy(predictions: Sequence[Prediction], truth) -> float:
    return top_n_accuracy(predictions, truth, 1)


def precision_recall(
    test: LabeledDataset,
    train: LabeledDataset,
    sim: Similarity,
    max_rank: int,
    k_vote: int | None = None,
) -> PrCurve:
    """Precision and recall of similarity-reranked Euclidean candidates.

    Each test sample's candidate pool is its ``k_vote`` nearest training
    samples (``max_rank`` when not given).  Recall is averaged over test
    samples that have at least one same-class candidate.
    """
    k_vote = max_rank if k_vote is None else k_vote
    if max_rank < 1 or max_rank > train.n:
        raise ValueError(f"max_rank must be in [1, {train.n}], got {max_rank}")
    if max_rank > k_vote:
        raise ValueError(f"max_rank={max_rank} exceeds candidate pool k_vote={k_vote}")
    pool = nearest_indices(test.features, train.features, k_vote)
    hits = np.zeros((test.n, max_rank))
    relevant = np.zeros(test.n)
    for t, rows in enumerate(pool):
        scores = similarity_matrix(sim, test.features[t], train.features[rows])[0]
        order = np.argsort(-scores, kind="stable")
        match = train.labels[rows[order]] == test.labels[t]
        hits[t] = np.cumsum(match[:max_rank])
        relevant[t] = match.sum()
    cutoffs = np.arange(1, max_rank + 1)
    precision = (hits / cutoffs).mean(axis=0)
    has_relevant = relevant > 0
    if has_relevant.any():
        recall = (hits[has_relevant] / relevant[has_relevant, None]).mean(axis=0)
    else:
        recall = np.zeros(max_rank)
    return PrCurve(cutoffs, precision, recall)


def write_predictions_csv(
    path, predictions: Sequence[Prediction], truth, top_n: Sequence[int] = (1, 3),
    classes: np.ndarray | None = None, header: dict | None = None,
) -> None:
    """Per-sample report: predicted and true class ids plus top-n hit flags."""
    truth = np.asarray(truth)
    ids = (lambda c: int(classes[c - 1])) if classes is not None else int
    with open(path, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "predicted", "true"] + [f"top{n}" for n in top_n])
        for t, (p, y) in enumerate(zip(predictions, truth)):
            ranking = p.ranking()
            flags = [int(int(y) in ranking[:n]) for n in top_n]
            writer.writerow([t, ids(p.label), ids(int(y))] + flags)


def write_pr_csv(path, curve: PrCurve, header: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cutoff", "precision", "recall"])
        for r, p, q in zip(curve.cutoffs, curve.precision, curve.recall):
            writer.writerow([int(r), repr(float(p)), repr(float(q))])
