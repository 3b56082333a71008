"""Command-line entry points: train, audit, detect, benchmark, simulate.

Exit codes: 0 success, 2 input/usage errors, 3 numerical failures.

Every command takes one ``--seed``.  Sub-streams are derived with
``numpy.random.SeedSequence``: training spawns (init, shuffle) children;
``audit`` uses ``default_rng(seed)`` per method in the order given; the
benchmark spawns one child per split and, inside a split, one child for
the split itself, one for training and one per method.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audit import (
    METHODS,
    build_audit_context,
    read_scores_csv,
    rue_kernel_matrix,
    rue_score_approx,
    save_context,
    score_method,
    write_scores_csv,
)
from .data import (
    DatasetMatrix,
    file_sha256,
    load_csv,
    load_manifest_entry,
    parse_split_spec,
    read_manifest,
    saturating_exp_mean,
    simulate_extrapolation_task,
    simulate_saturating_exp,
    standardize,
)
from .errors import InputError, NumericalError
from .evaluation import DEFAULT_METHODS, benchmark_run, detection_sweep
from .model import MlpArchitecture
from .train import TrainConfig, load_model, save_model, train

EXIT_INPUT = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("rue_audit")


def _write_manifest(out: Path, command: str, args: argparse.Namespace, dataset: dict) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": getattr(args, "seed", None),
        "arguments": resolved,
        "dataset": dataset,
    }
    Path(str(out) + ".manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n"
    )


def _dataset_identity(path) -> dict:
    return {"path": str(path), "sha256": file_sha256(path)}


def _table_csv(data: DatasetMatrix) -> str:
    lines = [",".join([*data.columns, data.target_name])]
    for row, t in zip(data.inputs, data.targets):
        lines.append(",".join(repr(float(v)) for v in [*row, t]))
    return "\n".join(lines) + "\n"


def _simulated(args) -> DatasetMatrix:
    return simulate_saturating_exp(args.beta1, args.beta2, args.noise, args.n,
                                   tuple(args.range), args.seed)


def _config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        regularize_bias=not args.no_bias_decay,
        seed=args.seed,
    )


def _fit(data: DatasetMatrix, args):
    tr, _, stats = standardize(data)
    arch = MlpArchitecture(tr.p, args.hidden, linear=args.linear)
    return tr, train(arch, tr.inputs, tr.targets, _config(args), stats)


def cmd_train(args) -> int:
    if args.simulate:
        data = _simulated(args)
        payload = _table_csv(data).encode()
        ident = {"path": "simulated", "sha256": hashlib.sha256(payload).hexdigest()}
    else:
        if args.data is None:
            raise InputError("train needs --data PATH or --simulate")
        data = load_csv(args.data, target=args.target)
        ident = _dataset_identity(args.data)
    _, model = _fit(data, args)
    out = Path(args.out)
    save_model(model, out)
    _write_manifest(out, "train", args, ident)
    print(f"wrote {out} (d={model.arch.n_params}, nu^2={model.residual_variance:.6g})")
    return 0


def _load_standardized(path, target, stats):
    raw = load_csv(path, target=target)
    return raw, stats.transform_inputs(raw.inputs), stats.transform_targets(raw.targets)


def cmd_audit(args) -> int:
    model = load_model(args.model)
    if model.stats is None:
        raise InputError(f"{args.model}: model carries no standardization statistics")
    stats = model.stats
    _, Xtr, ytr = _load_standardized(args.train, args.target, stats)
    _, Xte, _ = _load_standardized(args.test, args.target, stats)
    if Xtr.shape[1] != model.arch.input_dim:
        raise InputError(f"{args.train}: {Xtr.shape[1]} inputs, model expects {model.arch.input_dim}")
    ctx = build_audit_context(model, Xtr, ytr)
    if args.dump_context:
        save_context(ctx, args.dump_context)
    base = stats.inverse_targets(ctx.base_predictions(Xte))
    out = Path(args.out)
    out.write_text("")
    for method in args.method:
        rng = np.random.default_rng(args.seed)
        s = score_method(ctx, Xte, method, args.ensemble_size, rng, kde_seed=args.seed)
        if method not in ("kde", "null"):
            s = s * stats.y_std**2
        write_scores_csv(out, method, s, base, append=True)
    _write_manifest(out, "audit", args, {
        "train": _dataset_identity(args.train),
        "test": _dataset_identity(args.test),
        "model": _dataset_identity(args.model),
    })
    print(f"wrote {out} ({Xte.shape[0]} test points, lambda={ctx.damping:.6g})")
    return 0


def cmd_detect(args) -> int:
    truth = load_csv(args.truth, target=args.target)
    scores, base = {}, None
    for path in args.scores:
        for method, (s, f) in read_scores_csv(path).items():
            if s.size != truth.n:
                raise InputError(f"{path}: {s.size} rows for method {method}, truth has {truth.n}")
            if method in scores:
                raise InputError(f"method {method!r} appears in more than one scores file")
            scores[method], base = s, f
    if not scores:
        raise InputError("no scores given")
    det = detection_sweep(np.abs(truth.targets - base), scores, args.thresholds)
    out = Path(args.out)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "tau", "auc"])
        for method, vals in det.auc_by_method.items():
            for tau, a in zip(det.thresholds, vals):
                w.writerow([method, repr(float(tau)), "" if np.isnan(a) else repr(float(a))])
    for method in det.auc_by_method:
        print(f"{method}: mean AUC {det.mean_auc(method):.4f}")
    return 0


def cmd_benchmark(args) -> int:
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                         weight_decay=args.weight_decay, regularize_bias=not args.no_bias_decay)
    if args.synthetic:
        def source(seed):
            task = simulate_extrapolation_task(seed, n_train=args.n_train, n_test=args.n_test)
            return task.train, task.test

        name, ident, spec = "extrapolation", {"path": "synthetic"}, args.n_train
    else:
        if not (args.manifest and args.dataset):
            raise InputError("benchmark needs --synthetic or --manifest FILE --dataset NAME")
        entries = read_manifest(args.manifest)
        if args.dataset not in entries:
            raise InputError(f"{args.manifest}: no dataset named {args.dataset!r}")
        entry = entries[args.dataset]
        source = load_manifest_entry(entry)
        spec_text = args.train_spec or entry.train or "0.9"
        spec = parse_split_spec(spec_text)
        name, ident = entry.name, _dataset_identity(entry.path)
    report = benchmark_run(
        source, n_splits=args.splits, train_spec=spec, config=config, methods=args.methods,
        hidden_width=args.hidden, ensemble_size=args.ensemble_size, seed=args.seed,
        K=args.thresholds, name=name,
    )
    paths = report.write(args.out)
    _write_manifest(paths["report"], "benchmark", args, ident)
    for method, entry in report.summary().items():
        vals = ", ".join(f"{k}={v['mean']:.4f}" for k, v in entry.items())
        print(f"{method}: {vals}")
    failed = sum(s.error is not None for s in report.splits)
    if failed:
        print(f"{failed} split(s) failed; see report.json", file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    data = _simulated(args)
    out = Path(args.out)
    out.write_text(_table_csv(data))
    _write_manifest(out, "simulate", args, {"path": "simulated"})
    print(f"wrote {out} ({data.n} rows)")
    if args.illustrate:
        _illustrate(data, args, Path(args.illustrate))
    return 0


def _illustrate(data: DatasetMatrix, args, out_dir: Path) -> None:
    """Plot-ready tables: gradient projections, kernel basis curves, score curve."""
    out_dir.mkdir(parents=True, exist_ok=True)
    tr, model = _fit(data, args)
    save_model(model, out_dir / "model.json")
    stats = model.stats
    ctx = build_audit_context(model, tr.inputs, tr.targets)
    vals, vecs = ctx.hessian_eig
    top = vecs[:, ::-1][:, :2]
    proj = ctx.L.T @ top

    with (out_dir / "gradient_projections.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "x", "y", "proj_1", "proj_2"])
        for i in range(data.n):
            w.writerow([i, repr(float(data.inputs[i, 0])), repr(float(data.targets[i])),
                        repr(float(proj[i, 0])), repr(float(proj[i, 1]))])
    with (out_dir / "hessian_top_eigen.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "eigenvalue", "damped_eigenvalue"])
        for k, lam in enumerate(vals[::-1][:2], 1):
            w.writerow([k, repr(float(lam)), repr(float(lam + ctx.damping))])

    lo, hi = args.range
    grid = np.linspace(lo, hi, args.grid)
    grid_s = stats.transform_inputs(grid[:, None])
    order = np.argsort(data.inputs[:, 0])
    picks = order[[int(q * (data.n - 1)) for q in (0.1, 0.5, 0.9)]]
    K = rue_kernel_matrix(ctx, grid_s, tr.inputs[picks])
    with (out_dir / "kernel_basis.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid_x", "sample_index", "sample_x", "kernel"])
        for j, i in enumerate(picks):
            for g, k in zip(grid, K[:, j]):
                w.writerow([repr(float(g)), int(i), repr(float(data.inputs[i, 0])), repr(float(k))])

    score = rue_score_approx(ctx, grid_s)
    pred = stats.inverse_targets(ctx.base_predictions(grid_s))
    mean = saturating_exp_mean(grid, args.beta1, args.beta2)
    with (out_dir / "rue_variance.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid_x", "true_mean", "prediction", "rue_approx", "rue_approx_original_units"])
        for g, m, f, s in zip(grid, mean, pred, score):
            w.writerow([repr(float(g)), repr(float(m)), repr(float(f)), repr(float(s)),
                        repr(float(s * stats.y_std**2))])
    print(f"wrote illustration tables to {out_dir}")


def _add_sim_flags(p):
    p.add_argument("--beta1", type=float, default=1.0)
    p.add_argument("--beta2", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--range", type=float, nargs=2, default=[0.0, 5.0], metavar=("LO", "HI"))


def _add_train_flags(p, with_seed=True):
    p.add_argument("--hidden", type=int, default=50)
    p.add_argument("--linear", action="store_true", help="linear model (no hidden layer)")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--weight-decay", type=float, default=1.0)
    p.add_argument("--no-bias-decay", action="store_true", help="exclude biases from the penalty")
    if with_seed:
        p.add_argument("--seed", type=int, default=0)


def _methods(text):
    out = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in out if m not in METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s): {', '.join(bad)}")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rue-audit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a model artifact")
    p.add_argument("--data", help="delimited training table")
    p.add_argument("--target", default="-1", help="target column name or index (default last)")
    p.add_argument("--simulate", action="store_true", help="train on simulated saturating data")
    _add_sim_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", default="model.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit", help="score test points with an uncertainty method")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True, help="the table the model was trained on")
    p.add_argument("--test", required=True)
    p.add_argument("--target", default="-1")
    p.add_argument("--method", type=_methods, default=["rue"],
                   help=f"comma-separated subset of {{{','.join(METHODS)}}}")
    p.add_argument("--ensemble-size", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-context", help="also write the audit state to this .npz file")
    p.add_argument("--out", default="scores.csv")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("detect", help="AUC-vs-tolerance curves from score files")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--truth", required=True, help="test table holding the true targets")
    p.add_argument("--target", default="-1")
    p.add_argument("--thresholds", type=int, default=50)
    p.add_argument("--out", default="detection.csv")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("benchmark", help="multi-split error-detection and NLL benchmark")
    p.add_argument("--manifest")
    p.add_argument("--dataset")
    p.add_argument("--synthetic", action="store_true", help="use the extrapolation task")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--train-spec", help="training fraction (0.9) or count (600)")
    p.add_argument("--splits", type=int, default=20)
    p.add_argument("--methods", type=_methods, default=list(DEFAULT_METHODS))
    p.add_argument("--ensemble-size", type=int, default=100)
    p.add_argument("--thresholds", type=int, default=50)
    _add_train_flags(p)
    p.add_argument("--out", default="benchmark")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("simulate", help="write simulated saturating-exponential data")
    _add_sim_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="simulated.csv")
    p.add_argument("--illustrate", metavar="DIR", help="also fit a model and write figure tables")
    p.add_argument("--grid", type=int, default=200)
    _add_train_flags(p, with_seed=False)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
