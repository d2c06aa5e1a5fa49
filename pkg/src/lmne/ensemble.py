"""Ensembles of similarities learned in low-dimensional subspaces.

Each member owns a ``d x D`` projection (a block of consecutive PCA
directions or a Gaussian random matrix) and learns its own ``d x d``
similarity on projected features, independently of the other members and
with the neighborhoods of the original space.  An optional coordinate
descent pass then refines the members one at a time against the summed
ensemble similarity.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dataset import ZERO_NORM, LabeledDataset, PcaTransform
from .neighborhood import SymmetricPairSets
from .similarity import EnsembleModel, collapse_ensemble, objective
from .trainer import (
    TrainConfig, _renormalize, audit_anchors, step_size, train,
    usable_anchors,
)

log = logging.getLogger(__name__)

PROJECTION_KINDS = ("pca_blocks", "random")

# Member n trains with seed + n * SEED_STRIDE, so member 0 reuses the master seed.
SEED_STRIDE = 1_000_003


@dataclass(frozen=True)
class ProjectionSet:
    projections: tuple
    kind: str
    seed: Optional[int] = None

    @property
    def size(self) -> int:
        return len(self.projections)

    @property
    def d(self) -> int:
        return self.projections[0].shape[0]

    @property
    def dim(self) -> int:
        return self.projections[0].shape[1]


@dataclass(frozen=True)
class RefineRecord:
    round: int
    member: int
    objective_before: float
    objective_after: float
    updates: int
    accepted: bool


@dataclass
class EnsembleTrainReport:
    member_traces: list
    refine: list = field(default_factory=list)
    ensemble: Optional[EnsembleModel] = None


def make_projections(
    kind: str,
    pca: Optional[PcaTransform] = None,
    dim: Optional[int] = None,
    d: int = 100,
    n_members: int = 10,
    seed: int = 0,
) -> ProjectionSet:
    """Build ``n_members`` projections of shape ``d x D``.

    ``pca_blocks`` gives member n the PCA directions ``[n*d, (n+1)*d)``.
    ``random`` draws i.i.d. N(0, 1/d) entries from ``seed``.
    """
    if d < 1 or n_members < 1:
        raise ValueError("d and n_members must be positive")
    if kind == "pca_blocks":
        if pca is None:
            raise ValueError("pca_blocks projections need a fitted PCA")
        if n_members * d > pca.output_dim:
            raise ValueError(
                f"insufficient PCA directions: need {n_members}*{d}={n_members * d}, "
                f"have {pca.output_dim}"
            )
        blocks = tuple(pca.basis[n * d:(n + 1) * d].copy() for n in range(n_members))
        return ProjectionSet(blocks, kind)
    if kind == "random":
        if dim is None:
            dim = pca.input_dim if pca is not None else None
        if dim is None:
            raise ValueError("random projections need the ambient dimension")
        rng = np.random.default_rng(seed)
        mats = tuple(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, dim)) for _ in range(n_members))
        return ProjectionSet(mats, kind, seed)
    raise ValueError(f"unknown projection kind {kind!r}; expected one of {PROJECTION_KINDS}")


def member_config(config: TrainConfig, n: int) -> TrainConfig:
    return replace(config, seed=config.seed + n * SEED_STRIDE)


def project_dataset(data: LabeledDataset, p: np.ndarray, renormalize: bool = True) -> LabeledDataset:
    if p.shape[1] != data.dim:
        raise ValueError(f"projection expects D={p.shape[1]}, data has D={data.dim}")
    z = data.features @ p.T
    if not renormalize:
        return data.with_features(z)
    # Rescale to the source row's length: unit length for preprocessed data,
    # and an exact no-op when the projection preserves the norm.
    source = np.linalg.norm(data.features, axis=1)
    projected = np.linalg.norm(z, axis=1)
    zero = projected < ZERO_NORM
    keep = zero | (projected == source)
    factor = np.where(keep, 1.0, source / np.where(zero, 1.0, projected))
    z = z * factor[:, None]
    z[zero] = 0.0
    return data.with_features(z, flagged=data.flagged | zero)


def _train_member(task):
    n, data, pairs, p, config, renormalize = task
    member_data = project_dataset(data, p, renormalize)
    model, trace = train(member_data, pairs, member_config(config, n))
    return n, model.M, trace


def run_tasks(fn, tasks, jobs: int = 1):
    """Run independent tasks on a local worker pool; results in task order.

    The pool is the only place members meet, so swapping it for a cluster
    queue only needs another implementation of this function.
    """
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def train_members(
    data: LabeledDataset,
    pairs: SymmetricPairSets,
    proj: ProjectionSet,
    config: TrainConfig,
    jobs: int = 1,
    renormalize: bool = True,
) -> tuple[EnsembleModel, EnsembleTrainReport]:
    """Train every member independently and assemble the ensemble."""
    tasks = [(n, data, pairs, p, config, renormalize) for n, p in enumerate(proj.projections)]
    results = run_tasks(_train_member_checked, tasks, jobs)
    ens = EnsembleModel(proj.projections, tuple(m for _, m, _ in results))
    report = EnsembleTrainReport([t for _, _, t in results], ensemble=ens)
    return ens, report


class MemberError(RuntimeError):
    def __init__(self, member: int, cause: str):
        super().__init__(f"member {member} failed: {cause}")
        self.member = member


def _train_member_checked(task):
    try:
        return _train_member(task)
    except Exception as exc:  # re-raised with the member id attached
        raise MemberError(task[0], f"{type(exc).__name__}: {exc}") from exc


def ensemble_triplet_subgradient(ens: EnsembleModel, n: int, x_i, x_j, x_l, b: float) -> np.ndarray:
    """Subgradient of the ensemble triplet hinge with respect to ``M_n``."""
    x_i, x_j, x_l = (np.asarray(v, dtype=np.float64) for v in (x_i, x_j, x_l))
    a = collapse_ensemble(ens).M
    if b - x_i @ a @ x_j + x_i @ a @ x_l < 0:
        return np.zeros((ens.d, ens.d))
    p = ens.projections[n]
    return -np.outer(p @ x_i, p @ (x_j - x_l))


def _refine_member(ens, n, x, pairs, anchors, config, epochs, t, rng):
    """Coordinate step on member ``n``; returns the new ``M_n`` and update count."""
    p = ens.projections[n]
    m = ens.models[n].copy()
    others = np.zeros((ens.dim, ens.dim))
    for k, (pk, mk) in enumerate(zip(ens.projections, ens.models)):
        if k != n:
            others += pk.T @ mk @ pk
    z = x @ p.T
    # Similarities from the fixed members do not change during this step.
    fixed_t, fixed_l = {}, {}
    for i in anchors:
        u = x[i] @ others
        fixed_t[i] = x[pairs.targets[i]] @ u
        fixed_l[i] = x[pairs.imposters[i]] @ u
    target = float(np.sqrt(ens.d))
    b = config.b
    updates = 0
    for _ in range(epochs):
        for i in rng.permutation(anchors):
            tgt, imp = pairs.targets[i], pairs.imposters[i]
            u = z[i] @ m
            s_t = fixed_t[i] + z[tgt] @ u
            s_l = fixed_l[i] + z[imp] @ u
            if config.sampling == "selective":
                jj, ll = int(np.argmin(s_t)), int(np.argmax(s_l))
            else:
                jj, ll = int(rng.integers(len(tgt))), int(rng.integers(len(imp)))
            if b - s_t[jj] + s_l[ll] < 0:
                continue
            rho = step_size(t, len(x), config.rho0)
            m += rho * np.outer(z[i], z[tgt[jj]] - z[imp[ll]])
            if config.frob_normalize:
                _renormalize(m, target)
            updates += 1
            t += 1
        if config.symmetrize:
            m = 0.5 * (m + m.T)
            if config.frob_normalize:
                _renormalize(m, target)
    return m, updates


def joint_refine(
    ens: EnsembleModel,
    data: LabeledDataset,
    pairs: SymmetricPairSets,
    config: TrainConfig,
    rounds: int = 1,
    epochs: int = 2,
    step_offsets: Optional[list] = None,
) -> tuple[EnsembleModel, list]:
    """Coordinate descent over members against the full ensemble objective.

    Triplets are selected and hinges evaluated with the ensemble similarity;
    only ``M_n`` moves while member ``n`` is visited.  A member step that
    raises the audited ensemble objective by more than
    ``config.convergence_tol`` (relative) is rolled back.  ``step_offsets``
    continues each member's step-size schedule from its independent run.
    """
    if rounds < 0 or epochs < 1:
        raise ValueError("rounds must be >= 0 and epochs >= 1")
    if ens.dim != data.dim:
        raise ValueError(f"ensemble expects D={ens.dim}, data has D={data.dim}")
    usable = usable_anchors(data, pairs)
    anchors = np.flatnonzero(usable)
    if rounds and len(anchors) == 0:
        raise ValueError("no usable sample for refinement")
    audit = audit_anchors(usable, config.audit_subsample, config.seed)
    x = data.features
    steps = [1] * ens.size if step_offsets is None else [1 + s for s in step_offsets]
    records = []
    current = objective(ens, x, pairs, config.b, audit)
    for r in range(1, rounds + 1):
        for n in range(ens.size):
            rng = np.random.default_rng([config.seed, r, n])
            m, updates = _refine_member(ens, n, x, pairs, anchors, config, epochs, steps[n], rng)
            candidate = ens.replace(n, m)
            value = objective(candidate, x, pairs, config.b, audit)
            accepted = value <= current * (1 + config.convergence_tol)
            records.append(RefineRecord(r, n, current, value, updates, accepted))
            if accepted:
                ens, current = candidate, value
                steps[n] += updates
            else:
                log.info("round %d member %d: objective rose %.6g -> %.6g, step rolled back",
                         r, n, current, value)
    return ens, records


def steps_after_refine(steps: list, records: list) -> list:
    """Update counts per member once the kept refinement steps are added."""
    out = list(steps)
    for r in records:
        if r.accepted:
            out[r.member] += r.updates
    return out


def write_refine_csv(records: list, path, header: Optional[dict] = None) -> None:
    with open(path, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "member", "objective_before", "objective_after", "updates", "accepted"])
        for rec in records:
            writer.writerow([rec.round, rec.member, repr(rec.objective_before),
                             repr(rec.objective_after), rec.updates, int(rec.accepted)])
