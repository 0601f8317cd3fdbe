"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 input error, 3 infeasible configuration.
Every command first prints a ``# config`` line with all defaults resolved;
commands that produce a result finish with a single JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .data import (
    SPLIT_NAMES,
    Standardizer,
    SynthConfig,
    load_csv_views,
    make_synthetic,
    write_csv_views,
)
from .distributions import SeededRng
from .errors import (
    ConfigError,
    IngestionError,
    MaskingError,
    OptimizerError,
    PersistenceError,
    SemiMvaeError,
    TrainingError,
)
from .model import load_model, save_model
from .objective import gradient_check, tiny_problem
from .trainer import TrainConfig, evaluate, fit, run_experiment

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class InputError(SemiMvaeError):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _header(name: str, resolved: dict) -> None:
    print(f"# config {name} " + json.dumps(resolved, sort_keys=True, default=str))


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"output directory {out} is not writable: {exc}") from exc
    return out


def cmd_synth(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    cfg = SynthConfig.from_dict(raw)
    _header("synth", {**asdict(cfg), "out": str(args.out)})
    out = _out_dir(args.out)
    ds = make_synthetic(cfg)
    manifest = write_csv_views(ds, out)
    _emit(
        {
            "manifest": str(manifest),
            "num_rows": ds.num_rows,
            "view_dims": ds.view_dims,
            "class_counts": ds.class_counts().tolist(),
            "split_counts": {name: int(ds.rows(i).size) for i, name in enumerate(SPLIT_NAMES)},
        }
    )
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        n_labeled=args.batch_labeled,
        n_unlabeled=args.batch_unlabeled,
        beta=args.beta,
        lr=args.lr,
        T=args.samples,
        seed=args.seed,
        early_stop_patience=args.patience,
        mode=args.mode,
        clip_norm=args.clip_norm,
    )


def cmd_train(args) -> int:
    cfg = _train_config(args)
    overrides = {}
    if args.latent_dim is not None:
        overrides["latent_dim"] = args.latent_dim
    _header(
        "train",
        {
            **asdict(cfg),
            "data": str(args.data),
            "labeled_frac": args.labeled_frac,
            "standardize": not args.no_standardize,
            "uniform_prior": args.uniform_prior,
            "model_overrides": overrides,
            "out": str(args.out),
        },
    )
    dataset = load_csv_views(args.data)
    out = _out_dir(args.out)
    model, history, metrics = fit(
        dataset,
        args.labeled_frac,
        cfg,
        overrides,
        use_standardize=not args.no_standardize,
        uniform_prior=args.uniform_prior,
    )
    save_model(model, out / "model.mvae")
    (out / "history.json").write_text(json.dumps(history.to_dict(), indent=1) + "\n")
    result = {
        "test_accuracy": metrics["accuracy"],
        "best_epoch": history.best_epoch,
        "best_val_accuracy": history.best_val_accuracy,
        "view_weights": model.view_weights().tolist(),
    }
    (out / "metrics.json").write_text(json.dumps({**result, **metrics}, indent=1, sort_keys=True) + "\n")
    _emit({**result, "model": str(out / "model.mvae")})
    return EXIT_OK


def cmd_eval(args) -> int:
    _header("eval", {"model": str(args.model), "data": str(args.data), "split": args.split})
    model = load_model(args.model)
    dataset = load_csv_views(args.data)
    if dataset.view_dims != model.config.view_dims or dataset.num_classes != model.num_classes:
        raise InputError("dataset views/classes do not match the model")
    if "standardizer" in model.extras:
        tf = Standardizer.from_dict(model.extras["standardizer"])
        dataset.views = tf.apply(dataset.views)
        dataset.standardized = True
    metrics = evaluate(model, dataset, SPLIT_NAMES.index(args.split))
    _emit({"split": args.split, **metrics})
    return EXIT_OK


def cmd_experiment(args) -> int:
    spec = _read_json(args.spec)
    if "data" in spec:
        spec["data"] = str((Path(args.spec).parent / spec["data"]).resolve())
    _header("experiment", {**spec, "out": str(args.out)})
    out = _out_dir(args.out)
    result = run_experiment(spec, out)
    _emit({"summary": result["summary"], "failed_runs": result["failed_runs"], "results": str(out / "results.csv")})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _header("gradcheck", {"size": args.size, "seed": args.seed, "tolerance": GRADCHECK_TOL, "h": 1e-5})
    model, labeled, unlabeled, cfg = tiny_problem(args.seed)
    errs = gradient_check(
        model, labeled, unlabeled, SeededRng(args.seed).split("noise"), cfg, h=1e-5, corrupt=args.corrupt
    )
    for block, err in errs.items():
        print(f"{block:<12s} max_rel_err={err:.3e} {'ok' if err <= GRADCHECK_TOL else 'FAIL'}")
    failed = [b for b, e in errs.items() if not e <= GRADCHECK_TOL]
    _emit({"max_rel_err": errs, "failed_blocks": failed, "passed": not failed})
    return EXIT_CHECK if failed else EXIT_OK


def cmd_inspect(args) -> int:
    _header("inspect", {"model": str(args.model)})
    model = load_model(args.model)
    _emit(
        {
            "view_weights": model.view_weights().tolist(),
            "rho": model.rho.tolist(),
            "class_prior": model.config.class_prior,
            "config": asdict(model.config),
            "layer_shapes": {
                prefix: [list(layer.weight.shape) for layer in net.layers] for prefix, net in model.networks()
            },
            "num_parameters": model.num_parameters(),
        }
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semimvae", description="Semi-supervised multi-view VAE")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    s.add_argument("--config", help="JSON file with synthetic-data settings")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="mask labels, train, evaluate on the test split")
    t.add_argument("--data", required=True, help="manifest JSON")
    t.add_argument("--labeled-frac", type=float, default=0.01)
    t.add_argument("--beta", type=float, default=0.1)
    t.add_argument("--mode", choices=["inductive", "transductive"], default="inductive")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch-labeled", type=int, default=16)
    t.add_argument("--batch-unlabeled", type=int, default=128)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--samples", type=int, default=1, help="Monte-Carlo samples per component")
    t.add_argument("--patience", type=int, default=30)
    t.add_argument("--clip-norm", type=float, default=None)
    t.add_argument("--latent-dim", type=int, default=None)
    t.add_argument("--no-standardize", action="store_true")
    t.add_argument("--uniform-prior", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a saved model on one split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=list(SPLIT_NAMES), default="test")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run a grid of labeled fractions x seeds")
    x.add_argument("--spec", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_experiment)

    g = sub.add_parser("gradcheck", help="compare backprop gradients with finite differences")
    g.add_argument("--size", choices=["tiny"], default="tiny")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="print view weights, class prior and shapes of a model")
    i.add_argument("--model", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MaskingError, TrainingError, OptimizerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (InputError, IngestionError, PersistenceError, ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
