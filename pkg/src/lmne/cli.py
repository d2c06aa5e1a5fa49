"""Command-line pipeline: synth, preprocess, neighbors, train, refine, predict, eval.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose
keys are long option names; flags given on the command line win.

Exit codes: 0 success, 2 invalid parameters, 3 unreadable or malformed
input, 4 training failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import ensemble as en
from . import evaluate as ev
from . import neighborhood as nb
from . import similarity as sm
from . import synth
from .trainer import TrainConfig, train, write_trace_csv

log = logging.getLogger("lmne")

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_TRAINING = 4


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# config files

def read_config(path) -> dict:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def apply_config(parser: argparse.ArgumentParser, values: dict) -> None:
    """Install config values as parser defaults so explicit flags override them."""
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config", "command"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = _parse_bool(value)
        elif action.type is not None:
            try:
                defaults[key] = action.type(value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        else:
            defaults[key] = value
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        action.required = False
    parser.set_defaults(**defaults)


# --------------------------------------------------------------------------
# shared option groups

def _add_train_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--b", type=float, default=0.02, help="margin (default 0.02)")
    g.add_argument("--rho0", type=float, default=0.2, help="initial step size (default 0.2)")
    g.add_argument("--epochs", type=int, default=30, help="maximum epochs")
    g.add_argument("--tol", type=float, default=1e-3, help="relative objective change for convergence")
    g.add_argument("--sampling", choices=("selective", "uniform"), default="selective")
    g.add_argument("--symmetrize", action="store_true", help="symmetrize M after each epoch")
    g.add_argument("--no-frob", dest="frob", action="store_false",
                   help="disable Frobenius renormalization")
    g.add_argument("--audit-subsample", type=int, default=500)
    g.add_argument("--wall-time", action="store_true",
                   help="record epoch wall time in traces (outputs no longer byte-reproducible)")
    g.add_argument("--seed", type=int, default=0)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        b=args.b, rho0=args.rho0, max_epochs=args.epochs, convergence_tol=args.tol,
        sampling=args.sampling, symmetrize=args.symmetrize, frob_normalize=args.frob,
        seed=args.seed, audit_subsample=args.audit_subsample, record_time=args.wall_time,
    )


def _positive(name: str, value: int) -> None:
    if value is None or value < 1:
        raise UsageError(f"--{name.replace('_', '-')} must be >= 1, got {value}")


def _header(args, **extra) -> dict:
    out = {"command": args.command, "seed": getattr(args, "seed", 0)}
    out.update(extra)
    return out


def _write_meta(path, header: dict) -> None:
    with open(f"{path}.meta", "w") as fh:
        for key, value in header.items():
            fh.write(f"{key}={value}\n")


def _join(values) -> str:
    return ",".join(str(v) for v in values)


def _member_steps(path, size: int) -> list:
    """Per-member update counts from an ensemble's sidecar; zeros when absent."""
    meta = Path(f"{path}.meta")
    if meta.exists():
        for line in meta.read_text().splitlines():
            key, _, value = line.partition("=")
            if key == "member_steps" and value:
                steps = [int(v) for v in value.split(",")]
                if len(steps) == size:
                    return steps
    log.warning("no step counts recorded for %s; refinement restarts the step schedule", path)
    return [0] * size


def _load_data(path, fmt=None) -> ds.LabeledDataset:
    return ds.load_dataset(path, fmt)


def _load_index(path, data: ds.LabeledDataset) -> nb.NeighborhoodIndex:
    if not Path(path).exists():
        raise FileNotFoundError(f"neighborhood file not found: {path}")
    return nb.load_neighbors(path, data.labels)


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> None:
    _positive("n_train", args.n_train)
    _positive("n_test", args.n_test)
    _positive("dim", args.dim)
    kw = dict(dim=args.dim, seed=args.seed, coarse_sep=args.coarse_sep,
              fine_shift=args.fine_shift, noise=args.noise,
              nuisance_dims=args.nuisance_dims, nuisance_scale=args.nuisance_scale)
    train, test = synth.train_test_split(args.n_train, args.n_test, preprocess=False, **kw)
    for data, path in ((train, args.out_train), (test, args.out_test)):
        ds.save_dataset(data, path)
        ds.load_dataset(path)
        _write_meta(path, _header(args, **kw))
    print(f"wrote {train.n} training and {test.n} test samples, D={train.dim}")


def cmd_preprocess(args) -> None:
    data = _load_data(args.input, args.format)
    if args.pca_in:
        pca = ds.load_pca(args.pca_in)
    else:
        _positive("dim", args.dim)
        pca = ds.fit_pca(data, args.dim, subset_size=args.subset_size, seed=args.seed)
    out = ds.apply_preprocessing(data, pca)
    ds.save_dataset(out, args.output)
    check = ds.load_dataset(args.output)
    if check.n != out.n or check.dim != out.dim:
        raise RuntimeError("written dataset failed validation")
    _write_meta(args.output, _header(args, dim=pca.output_dim, input=args.input))
    if args.pca_out:
        ds.save_pca(pca, args.pca_out)
        ds.load_pca(args.pca_out)
    flagged = np.flatnonzero(out.flagged)
    flagged_path = args.flagged_out or f"{args.output}.flagged.csv"
    with open(flagged_path, "w") as fh:
        fh.write("index\n")
        fh.writelines(f"{i}\n" for i in flagged)
    print(f"preprocessed N={out.n} to D={out.dim}; {len(flagged)} zero rows flagged")


def cmd_neighbors(args) -> None:
    _positive("k", args.k)
    data = _load_data(args.data)
    index = nb.build_index(data, args.k, jobs=args.jobs)
    nb.save_neighbors(index, args.out)
    nb.load_neighbors(args.out, data.labels)
    pairs = nb.symmetrize(index)
    print(f"k={index.k}: {int(pairs.usable.sum())}/{data.n} usable anchors, "
          f"{pairs.triplet_count()} triplets")


def cmd_train_slne(args) -> None:
    config = _train_config(args)
    data = _load_data(args.data)
    pairs = nb.symmetrize(_load_index(args.neighbors, data))
    model, trace = train(data, pairs, config)
    sm.save_model(model, args.out)
    sm.load_model(args.out)
    header = _header(args, sampling=config.sampling, b=config.b, rho0=config.rho0)
    _write_meta(args.out, header)
    if args.trace:
        write_trace_csv(trace, args.trace, header)
    last = trace.epochs[-1]
    print(f"trained D={data.dim} in {len(trace.epochs)} epochs; final objective {last.objective:.6g}")


def _projections_for(args, data: ds.LabeledDataset) -> en.ProjectionSet:
    if args.projection == "random":
        return en.make_projections("random", dim=data.dim, d=args.d,
                                   n_members=args.members, seed=args.seed)
    if args.pca == "identity":
        pca = ds.identity_pca(data.dim)
    elif args.pca == "fit":
        pca = ds.fit_pca(data, min(args.d * args.members, data.n, data.dim), seed=args.seed)
    else:
        pca = ds.load_pca(args.pca)
    if pca.input_dim != data.dim:
        raise UsageError(f"PCA expects D={pca.input_dim}, data has D={data.dim}")
    return en.make_projections("pca_blocks", pca, d=args.d, n_members=args.members)


def cmd_train_slde(args) -> None:
    config = _train_config(args)
    _positive("d", args.d)
    _positive("members", args.members)
    _positive("jobs", args.jobs)
    if args.joint_rounds < 0:
        raise UsageError("--joint-rounds must be >= 0")
    data = _load_data(args.data)
    pairs = nb.symmetrize(_load_index(args.neighbors, data))
    proj = _projections_for(args, data)
    ens, report = en.train_members(data, pairs, proj, config, jobs=args.jobs,
                                   renormalize=args.renormalize)
    steps = [t.steps for t in report.member_traces]
    if args.joint_rounds:
        ens, report.refine = en.joint_refine(ens, data, pairs, config, args.joint_rounds,
                                             args.joint_epochs, steps)
        steps = en.steps_after_refine(steps, report.refine)
    sm.save_ensemble(ens, args.out)
    sm.load_ensemble(args.out)
    header = _header(args, projection=proj.kind, d=proj.d, members=proj.size)
    _write_meta(args.out, {**header, "member_steps": _join(steps)})
    if args.collapsed_out:
        sm.save_model(sm.collapse_ensemble(ens), args.collapsed_out)
        sm.load_model(args.collapsed_out)
    if args.trace_dir:
        out = Path(args.trace_dir)
        out.mkdir(parents=True, exist_ok=True)
        for n, trace in enumerate(report.member_traces):
            write_trace_csv(trace, out / f"member_{n:03d}.csv", {**header, "member": n})
        if report.refine:
            en.write_refine_csv(report.refine, out / "joint.csv", header)
    print(f"trained {proj.size} members of d={proj.d} ({proj.kind})")


def cmd_refine(args) -> None:
    config = _train_config(args)
    data = _load_data(args.data)
    pairs = nb.symmetrize(_load_index(args.neighbors, data))
    ens = sm.load_ensemble(args.ensemble)
    if args.start_step is not None:
        _positive("start_step", args.start_step)
        steps = [args.start_step - 1] * ens.size
    else:
        steps = _member_steps(args.ensemble, ens.size)
    ens, records = en.joint_refine(ens, data, pairs, config, args.rounds, args.joint_epochs, steps)
    sm.save_ensemble(ens, args.out)
    sm.load_ensemble(args.out)
    header = _header(args, rounds=args.rounds)
    steps = en.steps_after_refine(steps, records)
    _write_meta(args.out, {**header, "member_steps": _join(steps)})
    if args.trace:
        en.write_refine_csv(records, args.trace, header)
    if records:
        kept = [r.objective_after for r in records if r.accepted]
        end = kept[-1] if kept else records[0].objective_before
        accepted = sum(r.accepted for r in records)
        print(f"audited ensemble objective {records[0].objective_before:.6g} -> {end:.6g} "
              f"({accepted}/{len(records)} member steps kept)")


def _load_eval_inputs(args):
    _positive("k_vote", args.k_vote)
    train_data = _load_data(args.train)
    test_data = _load_data(args.test)
    model = sm.load_similarity(args.model)
    if model.dim != train_data.dim or test_data.dim != train_data.dim:
        raise UsageError(
            f"dimension mismatch: model D={model.dim}, train D={train_data.dim}, "
            f"test D={test_data.dim}"
        )
    # Test labels are remapped through the training class ids.
    lookup = {int(c): i + 1 for i, c in enumerate(train_data.classes)}
    truth = np.array([lookup.get(int(c), 0) for c in test_data.original_labels])
    return train_data, test_data, model, truth


def cmd_predict(args) -> None:
    train_data, test_data, model, _ = _load_eval_inputs(args)
    preds = ev.predict_batch(test_data, train_data, model, args.k_vote, jobs=args.jobs)
    with open(args.out, "w") as fh:
        fh.write(f"# command={args.command}\n")
        names = [str(int(c)) for c in train_data.classes]
        fh.write("index,predicted," + ",".join(f"score_{c}" for c in names) + "\n")
        for t, p in enumerate(preds):
            scores = ",".join(repr(float(s)) for s in p.scores)
            fh.write(f"{t},{int(train_data.classes[p.label - 1])},{scores}\n")
    print(f"wrote {len(preds)} predictions")


def cmd_eval(args) -> None:
    train_data, test_data, model, truth = _load_eval_inputs(args)
    top_n = sorted({int(n) for n in str(args.top_n).split(",") if n.strip()})
    for n in top_n:
        _positive("top_n", n)
    preds = ev.predict_batch(test_data, train_data, model, args.k_vote, jobs=args.jobs)
    lines = [f"learned top-{n} accuracy: {ev.top_n_accuracy(preds, truth, n):.6f}" for n in top_n]
    header = _header(args, k_vote=args.k_vote)
    if args.report:
        ev.write_predictions_csv(args.report, preds, truth, top_n, train_data.classes, header)
    if args.baseline == "euclidean":
        base = ev.euclidean_knn_baseline(test_data, train_data, args.k_vote)
        lines += [f"euclidean top-{n} accuracy: {ev.top_n_accuracy(base, truth, n):.6f}"
                  for n in top_n]
    if args.pr_out:
        max_rank = args.max_rank or args.k_vote
        known = truth > 0
        test_known = ds.LabeledDataset(test_data.features[known], truth[known], train_data.classes)
        curve = ev.precision_recall(test_known, train_data, model, max_rank, args.k_vote)
        ev.write_pr_csv(args.pr_out, curve, header)
    print("\n".join(lines))


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmne", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key = value file; flags override it")
        p.set_defaults(func=fn)
        return p

    p = command("synth", cmd_synth, "write a seeded fine-grained synthetic train/test pair")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.add_argument("--n-train", type=int, default=200, help="training samples per class")
    p.add_argument("--n-test", type=int, default=200, help="test samples per class")
    p.add_argument("--dim", type=int, default=50)
    p.add_argument("--coarse-sep", type=float, default=6.0)
    p.add_argument("--fine-shift", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--nuisance-dims", type=int, default=5)
    p.add_argument("--nuisance-scale", type=float, default=2.5)
    p.add_argument("--seed", type=int, default=0)

    p = command("preprocess", cmd_preprocess, "fit/apply PCA and normalize lengths")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("binary", "csv"), default=None)
    p.add_argument("--output", required=True)
    p.add_argument("--dim", type=int, help="PCA target dimension when fitting")
    p.add_argument("--pca-in", help="apply an existing MSP1 transform instead of fitting")
    p.add_argument("--pca-out", help="write the fitted MSP1 transform")
    p.add_argument("--flagged-out", help="CSV of zero rows (default OUTPUT.flagged.csv)")
    p.add_argument("--subset-size", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)

    p = command("neighbors", cmd_neighbors, "build exact Euclidean neighborhoods")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = command("train-slne", cmd_train_slne, "train a single full-space similarity")
    p.add_argument("--data", required=True)
    p.add_argument("--neighbors", required=True)
    p.add_argument("--out", required=True, help="MSM1 model path")
    p.add_argument("--trace", help="per-epoch trace CSV")
    _add_train_options(p)

    p = command("train-slde", cmd_train_slde, "train a subspace ensemble")
    p.add_argument("--data", required=True)
    p.add_argument("--neighbors", required=True)
    p.add_argument("--out", required=True, help="MSE1 ensemble path")
    p.add_argument("--collapsed-out", help="also write the summed MSM1 model")
    p.add_argument("--trace-dir", help="directory for per-member and joint CSVs")
    p.add_argument("--projection", choices=en.PROJECTION_KINDS, default="pca_blocks")
    p.add_argument("--pca", default="fit",
                   help="MSP1 path, 'fit' (fit on --data) or 'identity' (coordinate blocks)")
    p.add_argument("--d", type=int, default=100, help="subspace dimension")
    p.add_argument("--members", type=int, default=10, help="ensemble size")
    p.add_argument("--no-renormalize", dest="renormalize", action="store_false",
                   help="train members on unnormalized projections")
    p.add_argument("--joint-rounds", type=int, default=0)
    p.add_argument("--joint-epochs", type=int, default=2)
    p.add_argument("--jobs", type=int, default=1, help="parallel member trainings")
    _add_train_options(p)

    p = command("refine", cmd_refine, "coordinate-descent refinement of an ensemble")
    p.add_argument("--data", required=True)
    p.add_argument("--neighbors", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="refinement CSV")
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--joint-epochs", type=int, default=2)
    p.add_argument("--start-step", type=int, default=None,
                   help="step counter to resume from (default: counts in the ensemble's .meta)")
    _add_train_options(p)

    for name, fn, help in (("predict", cmd_predict, "soft-voting kNN predictions"),
                           ("eval", cmd_eval, "accuracy report and precision-recall curve")):
        p = command(name, fn, help)
        p.add_argument("--train", required=True)
        p.add_argument("--test", required=True)
        p.add_argument("--model", required=True, help="MSM1 or MSE1 file")
        p.add_argument("--k-vote", type=int, default=20)
        p.add_argument("--jobs", type=int, default=1)
        if name == "predict":
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--top-n", default="1,3")
            p.add_argument("--report", help="per-sample CSV")
            p.add_argument("--pr-out", help="precision-recall CSV")
            p.add_argument("--max-rank", type=int, default=None)
            p.add_argument("--baseline", choices=("none", "euclidean"), default="none")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            values = read_config(known.config)
            subparsers = next(a for a in parser._actions
                              if isinstance(a, argparse._SubParsersAction))
            command = next((a for a in argv if a in subparsers.choices), None)
            if command is None:
                raise UsageError("--config needs a subcommand")
            apply_config(subparsers.choices[command], values)
    except UsageError as exc:
        print(f"lmne: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"lmne: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ds.FormatError, OSError) as exc:
        print(f"lmne: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except en.MemberError as exc:
        print(f"lmne: error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ValueError as exc:
        print(f"lmne: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
