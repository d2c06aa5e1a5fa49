import numpy as np
import pytest

from lmne.dataset import LabeledDataset, from_raw_labels
from lmne.ensemble import make_projections
from lmne.evaluate import (
    Prediction, _vote, accuracy, euclidean_knn_baseline, precision_recall, predict, predict_batch,
    top_n_accuracy, write_pr_csv, write_predictions_csv,
)
from lmne.similarity import EnsembleModel, SimilarityModel, collapse_ensemble

from conftest import random_dataset


def three_voters():
    # Voters at distances 1, 2, 3 from the origin query with labels a, a, b.
    x = np.array([[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0]])
    return from_raw_labels(x, [1, 1, 2])


def test_soft_vote_sums_similarities():
    train = three_voters()
    model = SimilarityModel(np.array([[0.5, -0.2], [0.1, 0.3]]))
    q = np.array([0.1, 0.05])
    p = predict(q, train, model, 3)
    s = train.features @ model.M.T @ q
    np.testing.assert_allclose(p.scores, [s[0] + s[1], s[2]])
    # Only the nearest voter is used with k_vote=1.
    np.testing.assert_allclose(predict(q, train, model, 1).scores, [s[0], -np.inf])


def test_vote_example_minority_wins_on_weight():
    p = _vote(np.array([1, 1, 2]), np.array([0.2, 0.3, 0.6]), 2)
    np.testing.assert_allclose(p.scores, [0.5, 0.6])
    assert p.label == 2


def test_unanimous_vote_and_missing_classes():
    p = _vote(np.array([2, 2]), np.array([-1.0, -2.0]), 3)
    assert p.label == 2
    assert p.scores[0] == -np.inf and p.scores[2] == -np.inf
    assert p.ranking()[0] == 2


def test_ties_go_to_smaller_class():
    p = Prediction(np.array([-np.inf, 1.0, 1.0]))
    assert p.label == 2
    assert p.ranking().tolist() == [2, 3, 1]


def test_top_n_hand_count():
    # Truth is always ranked second.
    preds = [Prediction(np.array([3.0, 2.0, 1.0]))] * 10
    truth = [2] * 10
    assert top_n_accuracy(preds, truth, 1) == 0.0
    assert top_n_accuracy(preds, truth, 2) == 1.0
    assert top_n_accuracy(preds, truth, 3) == 1.0
    mixed = [Prediction(np.array([1.0, 0.0]))] * 7 + [Prediction(np.array([0.0, 1.0]))] * 3
    assert accuracy(mixed, [1] * 10) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        top_n_accuracy(preds, truth, 0)
    with pytest.raises(ValueError):
        top_n_accuracy(preds, truth[:3], 1)


def test_top_n_monotone(rng):
    train = random_dataset(rng, 80, 5, 4)
    test = random_dataset(rng, 30, 5, 4)
    preds = predict_batch(test, train, SimilarityModel.identity(5), 10)
    acc = [top_n_accuracy(preds, test.labels, n) for n in (1, 2, 3, 4)]
    assert acc == sorted(acc)
    assert acc[-1] == 1.0


def test_scale_invariance(rng):
    train = random_dataset(rng, 60, 4, 3)
    test = random_dataset(rng, 20, 4, 3)
    m = rng.normal(size=(4, 4))
    a = predict_batch(test, train, SimilarityModel(m), 7)
    b = predict_batch(test, train, SimilarityModel(3.5 * m), 7)
    assert [p.label for p in a] == [p.label for p in b]


def test_ensemble_and_collapsed_predict_identically(rng):
    train = random_dataset(rng, 80, 10, 3)
    test = random_dataset(rng, 30, 10, 3)
    proj = make_projections("random", dim=10, d=4, n_members=3, seed=0)
    ens = EnsembleModel(proj.projections, tuple(rng.normal(size=(4, 4)) for _ in range(3)))
    a = predict_batch(test, train, ens, 9)
    b = predict_batch(test, train, collapse_ensemble(ens), 9)
    assert [p.label for p in a] == [p.label for p in b]
    for p, q in zip(a, b):
        np.testing.assert_allclose(p.scores, q.scores, rtol=1e-9)


def test_predict_validates(rng):
    train = random_dataset(rng, 20, 3, 2)
    with pytest.raises(ValueError):
        predict_batch(np.zeros((2, 4)), train, SimilarityModel.identity(3), 3)
    with pytest.raises(ValueError):
        predict_batch(np.zeros((2, 3)), train, SimilarityModel.identity(3), 0)


def test_baseline_majority_vote():
    train = from_raw_labels(np.array([[0.0], [1.0], [1.1], [5.0]]), [1, 2, 2, 1])
    preds = euclidean_knn_baseline(np.array([[0.9]]), train, 3)
    np.testing.assert_array_equal(preds[0].scores, [1.0, 2.0])


def line_problem():
    # Training points on a line; class 1 on the left, class 2 on the right.
    x = np.array([[-3.0], [-2.0], [-1.0], [1.0], [2.0], [3.0]])
    train = from_raw_labels(x, [1, 1, 1, 2, 2, 2])
    test = LabeledDataset(np.array([[-0.1], [0.1]]), np.array([1, 2]), train.classes)
    return train, test


def test_pr_perfect_ranking():
    train, test = line_problem()
    # s(x, z) = x z ranks same-side training points first.
    curve = precision_recall(test, train, SimilarityModel.identity(1), 6)
    np.testing.assert_allclose(curve.precision[:3], 1.0)
    np.testing.assert_allclose(curve.recall, [1 / 3, 2 / 3, 1, 1, 1, 1])
    np.testing.assert_allclose(curve.precision[5], 0.5)


def test_pr_adversarial_ranking():
    train, test = line_problem()
    curve = precision_recall(test, train, SimilarityModel(-np.eye(1)), 6)
    np.testing.assert_allclose(curve.precision[:3], 0.0)
    np.testing.assert_allclose(curve.recall[:3], 0.0)
    assert curve.recall[-1] == 1.0


def test_pr_recall_monotone_and_complete(rng):
    train = random_dataset(rng, 50, 4, 3)
    test = random_dataset(rng, 15, 4, 3)
    curve = precision_recall(test, train, SimilarityModel(rng.normal(size=(4, 4))), 50)
    assert np.all(np.diff(curve.recall) >= -1e-15)
    assert curve.recall[-1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        precision_recall(test, train, SimilarityModel.identity(4), 51)
    with pytest.raises(ValueError):
        precision_recall(test, train, SimilarityModel.identity(4), 10, k_vote=5)


def test_csv_writers(tmp_path):
    preds = [Prediction(np.array([1.0, 0.0])), Prediction(np.array([0.0, 1.0]))]
    path = tmp_path / "report.csv"
    write_predictions_csv(path, preds, [1, 1], (1, 2), np.array([10, 20]), {"seed": 3})
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed=3"
    assert lines[1] == "index,predicted,true,top1,top2"
    assert lines[2:] == ["0,10,10,1,1", "1,20,10,0,1"]
    train, test = line_problem()
    curve = precision_recall(test, train, SimilarityModel.identity(1), 2)
    write_pr_csv(tmp_path / "pr.csv", curve)
    assert (tmp_path / "pr.csv").read_text().splitlines()[0] == "cutoff,precision,recall"
