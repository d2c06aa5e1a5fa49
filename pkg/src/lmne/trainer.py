"""Online subgradient training of a single bilinear similarity.

Each epoch visits the usable samples in a fresh random order.  For every
anchor a (target, imposter) pair is drawn, either the most violating one or
a uniformly random one, and ``M`` takes a rank-one step along
``x_i (x_j - x_l)^T`` with a step size that decays as ``1/sqrt(epochs)``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dataset import LabeledDataset
from .neighborhood import SymmetricPairSets
from .similarity import SimilarityModel, objective

SAMPLING_MODES = ("selective", "uniform")

# Marker folded into the audit-subsample seed so it does not share a
# stream with the permutation RNG.
_AUDIT_STREAM = 0xA0D17


@dataclass(frozen=True)
class TrainConfig:
    b: float = 0.02
    rho0: float = 0.2
    max_epochs: int = 30
    convergence_tol: float = 1e-3
    sampling: str = "selective"
    symmetrize: bool = False
    frob_normalize: bool = True
    seed: int = 0
    audit_subsample: int = 500
    record_time: bool = False

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"margin b must be > 0, got {self.b}")
        if not self.rho0 > 0:
            raise ValueError(f"rho0 must be > 0, got {self.rho0}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be non-negative")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"sampling must be one of {SAMPLING_MODES}")
        if self.audit_subsample < 1:
            raise ValueError("audit_subsample must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    objective: float
    updates: int
    skips: int
    seconds: float


@dataclass
class TrainTrace:
    initial_objective: float = 0.0
    epochs: list = field(default_factory=list)
    steps: int = 0
    similarity_evals: int = 0
    similarity_flops: int = 0
    update_flops: int = 0

    @property
    def objectives(self) -> list:
        return [r.objective for r in self.epochs]

    @property
    def updates(self) -> int:
        return sum(r.updates for r in self.epochs)


def step_size(t: int, dataset_size: int, rho0: float) -> float:
    """``rho0 / sqrt((t - 1) / |S| + 1)`` for the ``t``-th update."""
    if t < 1:
        raise ValueError(f"update counter starts at 1, got {t}")
    return rho0 / np.sqrt((t - 1) / dataset_size + 1.0)


def _pick(x_i, m, x, tgt, imp, b, sampling, rng):
    # Returns (j, l, similarity evaluations); j is None when nothing violates.
    u = x_i @ m
    if sampling == "selective":
        s_t = x[tgt] @ u
        s_l = x[imp] @ u
        jj = int(np.argmin(s_t))
        ll = int(np.argmax(s_l))
        evals = len(tgt) + len(imp)
        violation = b - s_t[jj] + s_l[ll]
    else:
        jj = int(rng.integers(len(tgt)))
        ll = int(rng.integers(len(imp)))
        evals = 2
        violation = b - x[tgt[jj]] @ u + x[imp[ll]] @ u
    if violation < 0:
        return None, None, evals
    return int(tgt[jj]), int(imp[ll]), evals


def select_triplet(
    i: int,
    model: SimilarityModel,
    data: LabeledDataset | np.ndarray,
    pairs: SymmetricPairSets,
    b: float = 0.02,
    sampling: str = "selective",
    rng: Optional[np.random.Generator] = None,
):
    """Pick the ``(target, imposter)`` pair to update on for anchor ``i``.

    Selective mode takes the least similar target and the most similar
    imposter, lowest index on ties.  Uniform mode draws one pair at random.
    Returns ``None`` if the pair already satisfies the margin or if the
    anchor has no targets or no imposters.
    """
    x = data.features if isinstance(data, LabeledDataset) else np.asarray(data, float)
    tgt, imp = pairs.targets[i], pairs.imposters[i]
    if len(tgt) == 0 or len(imp) == 0:
        return None
    if sampling not in SAMPLING_MODES:
        raise ValueError(f"sampling must be one of {SAMPLING_MODES}")
    if rng is None:
        rng = np.random.default_rng()
    j, l, _ = _pick(x[i], model.M, x, tgt, imp, b, sampling, rng)
    return None if j is None else (j, l)


def _renormalize(m: np.ndarray, target: float) -> None:
    norm = np.linalg.norm(m)
    if norm > 0:
        m *= target / norm


def apply_update(
    model: SimilarityModel,
    x_i,
    x_j,
    x_l,
    rho: float,
    frob_normalize: bool = False,
) -> SimilarityModel:
    """Return ``M + rho * x_i (x_j - x_l)^T``, optionally rescaled to norm sqrt(D)."""
    m = model.M.copy()
    m += rho * np.outer(np.asarray(x_i, float), np.asarray(x_j, float) - np.asarray(x_l, float))
    if frob_normalize:
        _renormalize(m, model.frob_target)
    return SimilarityModel(m)


def audit_anchors(usable: np.ndarray, size: int, seed: int) -> np.ndarray:
    """Fixed subsample of usable anchors on which the objective is traced."""
    idx = np.flatnonzero(usable)
    if size >= len(idx):
        return idx
    rng = np.random.default_rng([seed, _AUDIT_STREAM])
    return np.sort(rng.choice(idx, size, replace=False))


def usable_anchors(data: LabeledDataset, pairs: SymmetricPairSets) -> np.ndarray:
    if pairs.n != data.n:
        raise ValueError(f"pair sets cover {pairs.n} samples, dataset has {data.n}")
    return pairs.usable & ~data.flagged


def converged(objectives: list, tol: float) -> bool:
    """True once the relative change stayed below ``tol`` for two epochs running."""
    if len(objectives) < 3:
        return False
    for prev, cur in ((objectives[-3], objectives[-2]), (objectives[-2], objectives[-1])):
        scale = max(abs(prev), np.finfo(float).tiny)
        if abs(cur - prev) / scale >= tol:
            return False
    return True


def train(
    data: LabeledDataset,
    pairs: SymmetricPairSets,
    config: TrainConfig,
    callback: Optional[Callable[[int, SimilarityModel], None]] = None,
    initial: Optional[SimilarityModel] = None,
    start_step: int = 1,
) -> tuple[SimilarityModel, TrainTrace]:
    """Learn ``M`` from identity (or ``initial``) until convergence or ``max_epochs``.

    ``callback(epoch, model)`` runs after every epoch, and once with epoch 0
    before training starts.  ``start_step`` lets a caller continue the
    step-size schedule of an earlier run.
    """
    usable = usable_anchors(data, pairs)
    anchors = np.flatnonzero(usable)
    if len(anchors) == 0:
        raise ValueError("no usable sample: every anchor lacks targets or imposters")
    x = data.features
    dim = data.dim
    m = np.eye(dim) if initial is None else np.array(initial.M, dtype=np.float64)
    if m.shape != (dim, dim):
        raise ValueError(f"initial model is {m.shape}, data dimension is {dim}")
    target = float(np.sqrt(dim))
    rng = np.random.default_rng(config.seed)
    audit = audit_anchors(usable, config.audit_subsample, config.seed)
    b, sampling = config.b, config.sampling
    n_total = data.n

    trace = TrainTrace()
    trace.initial_objective = objective(SimilarityModel(m), x, pairs, b, audit)
    history = [trace.initial_objective]
    if callback is not None:
        callback(0, SimilarityModel(m.copy()))

    t = start_step
    per_update = (5 if config.frob_normalize else 2) * dim * dim
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        updates = skips = 0
        for i in rng.permutation(anchors):
            tgt, imp = pairs.targets[i], pairs.imposters[i]
            j, l, evals = _pick(x[i], m, x, tgt, imp, b, sampling, rng)
            trace.similarity_evals += evals
            trace.similarity_flops += 2 * dim * dim + 2 * evals * dim
            if j is None:
                skips += 1
                continue
            rho = step_size(t, n_total, config.rho0)
            m += rho * np.outer(x[i], x[j] - x[l])
            if config.frob_normalize:
                _renormalize(m, target)
            trace.update_flops += per_update
            updates += 1
            t += 1
        if config.symmetrize:
            m = 0.5 * (m + m.T)
            if config.frob_normalize:
                _renormalize(m, target)
        current = SimilarityModel(m.copy())
        value = objective(current, x, pairs, b, audit)
        seconds = time.perf_counter() - started if config.record_time else 0.0
        trace.epochs.append(EpochRecord(epoch, value, updates, skips, seconds))
        history.append(value)
        if callback is not None:
            callback(epoch, current)
        if converged(history, config.convergence_tol):
            break
    trace.steps = t - start_step
    return SimilarityModel(m), trace


TRACE_COLUMNS = ("epoch", "objective", "updates", "skips", "seconds")


def write_trace_csv(trace: TrainTrace, path, header: Optional[dict] = None) -> None:
    with open(path, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in trace.epochs:
            writer.writerow([r.epoch, repr(r.objective), r.updates, r.skips, f"{r.seconds:.6f}"])


def read_trace_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    return [
        EpochRecord(int(r["epoch"]), float(r["objective"]), int(r["updates"]),
                    int(r["skips"]), float(r["seconds"]))
        for r in reader
    ]
