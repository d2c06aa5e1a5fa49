import numpy as np
import pytest

from lmne.dataset import LabeledDataset, from_raw_labels
from lmne.neighborhood import build_index, symmetrize

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_dataset(rng, n, dim, n_classes, normalize=True) -> LabeledDataset:
    x = rng.standard_normal((n, dim))
    if normalize:
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = rng.integers(1, n_classes + 1, size=n)
    y[:n_classes] = np.arange(1, n_classes + 1)
    return from_raw_labels(x, y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_problem(rng):
    data = random_dataset(rng, 60, 6, 3)
    index = build_index(data, 8)
    return data, index, symmetrize(index)


def run_cli(*argv):
    from lmne.cli import main
    return main([str(a) for a in argv])


def run_pipeline(out, seed=3):
    """Every CLI stage on a small synthetic set; returns the produced paths."""
    out.mkdir(parents=True, exist_ok=True)
    p = {name: out / name for name in (
        "raw_train.bin", "raw_test.bin", "train.bin", "test.bin", "pca.bin", "nbrs.bin",
        "slne.bin", "slne.csv", "slde.bin", "slde_flat.bin", "traces", "refined.bin",
        "refine.csv", "pred.csv", "report.csv", "pr.csv")}
    steps = [
        ("synth", "--out-train", p["raw_train.bin"], "--out-test", p["raw_test.bin"],
         "--n-train", 30, "--n-test", 10, "--dim", 12, "--seed", seed),
        ("preprocess", "--input", p["raw_train.bin"], "--output", p["train.bin"], "--dim", 12,
         "--pca-out", p["pca.bin"], "--seed", seed),
        ("preprocess", "--input", p["raw_test.bin"], "--output", p["test.bin"], "--pca-in", p["pca.bin"]),
        ("neighbors", "--data", p["train.bin"], "--k", 6, "--out", p["nbrs.bin"]),
        ("train-slne", "--data", p["train.bin"], "--neighbors", p["nbrs.bin"], "--out", p["slne.bin"],
         "--trace", p["slne.csv"], "--epochs", 3, "--seed", seed),
        ("train-slde", "--data", p["train.bin"], "--neighbors", p["nbrs.bin"], "--out", p["slde.bin"],
         "--projection", "random", "--d", 4, "--members", 3, "--joint-rounds", 1,
         "--epochs", 2, "--collapsed-out", p["slde_flat.bin"], "--trace-dir", p["traces"], "--seed", seed),
        ("refine", "--data", p["train.bin"], "--neighbors", p["nbrs.bin"], "--ensemble", p["slde.bin"],
         "--out", p["refined.bin"], "--trace", p["refine.csv"], "--seed", seed),
        ("predict", "--train", p["train.bin"], "--test", p["test.bin"], "--model", p["slne.bin"],
         "--k-vote", 5, "--out", p["pred.csv"]),
        ("eval", "--train", p["train.bin"], "--test", p["test.bin"], "--model", p["refined.bin"],
         "--k-vote", 5, "--report", p["report.csv"], "--pr-out", p["pr.csv"], "--baseline", "euclidean"),
    ]
    for step in steps:
        code = run_cli(*step)
        assert code == 0, f"{step[0]} exited with {code}"
    return p
