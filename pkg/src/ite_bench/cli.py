"""Command-line interface.

Commands: simulate, train, evaluate, sweep, report. Exit codes:
0 success, 2 configuration error, 3 data error, 4 numeric error
(divergence or non-finite values), 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, DataError, NumericError
from .experiments import (
    ExperimentConfig,
    RunRecord,
    SweepSpec,
    render_eval_report,
    render_report_table,
    report_table_csv,
    run_sweep,
    write_json_atomic,
)
from .metrics import EvalReport, evaluate_model
from .model import TrainConfig, load_checkpoint, save_checkpoint, train
from .simulate import SimConfig, load_dataset, save_dataset, simulate_dataset

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _default_threads() -> int:
    env = os.environ.get("ITE_BENCH_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError as exc:
            raise ConfigError(f"ITE_BENCH_THREADS must be an integer, got {env!r}") from exc
        if value < 1:
            raise ConfigError("ITE_BENCH_THREADS must be >= 1")
        return value
    return os.cpu_count() or 1


def _load_json(path) -> dict:
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _load_experiment_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.from_dict(_load_json(path))


def cmd_simulate(args) -> int:
    cfg = _load_experiment_config(args.config).sim
    updates = {}
    for name in ("n", "d", "k", "c", "seed"):
        value = getattr(args, name)
        if value is not None:
            updates[name] = value
    if args.kappa is not None:
        parts = [float(v) for v in args.kappa.split(",")]
        updates["kappa"] = parts[0] if len(parts) == 1 else tuple(parts)
    if args.centroid_method is not None:
        updates["centroid_method"] = args.centroid_method
    if args.covariate_file is not None:
        updates["covariate_source"] = "file"
        updates["embedding_file"] = args.covariate_file
    if updates:
        cfg = SimConfig.from_dict({**cfg.to_dict(), **updates})
    cfg.validate()
    ds = simulate_dataset(cfg)
    save_dataset(ds, args.out, force=args.force)
    sizes = {name: len(ds.splits[name]) for name in ("train", "val", "test")}
    print(
        f"wrote dataset to {args.out}: n={ds.n} d={ds.d} k={ds.k} "
        f"seed={cfg.seed} splits={sizes}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_experiment_config(args.config)
    ds = load_dataset(args.dataset)
    if args.config is not None and (cfg.sim.d != ds.d or cfg.sim.k != ds.k):
        raise DataError(
            f"config expects d={cfg.sim.d}, k={cfg.sim.k}; dataset has "
            f"d={ds.d}, k={ds.k}"
        )
    train_doc = cfg.train.to_dict()
    for flag, name in (
        ("seed", "seed"),
        ("epochs_max", "epochs_max"),
        ("alpha", "alpha"),
        ("beta", "beta"),
        ("batch_size", "batch_size"),
        ("lr", "base_lr"),
    ):
        value = getattr(args, flag)
        if value is not None:
            train_doc[name] = value
    train_cfg = TrainConfig.from_dict(train_doc)
    variant = args.variant or cfg.variant
    trained = train(ds, cfg.shape, train_cfg, variant)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.json")
    if os.path.exists(ckpt_path) and not args.force:
        raise DataError(f"{ckpt_path} exists; pass --force to overwrite")
    save_checkpoint(ckpt_path, trained)
    write_json_atomic(
        os.path.join(args.out, "history.json"),
        {
            "schema_version": "1",
            "variant": variant,
            "best_epoch": trained.best_epoch,
            "best_val_mse": trained.best_val_mse,
            "history": trained.history.to_dict(),
        },
    )
    epochs = trained.history.n_epochs()
    print(
        f"trained {variant} for {epochs} epochs; best epoch "
        f"{trained.best_epoch} (val mse {trained.best_val_mse}); wrote {ckpt_path}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.dataset)
    trained = load_checkpoint(args.checkpoint)
    if args.zero_shot is not None and not 0 <= args.zero_shot < ds.k:
        raise ConfigError(
            f"--zero-shot {args.zero_shot} out of range 0..{ds.k - 1}"
        )
    report = evaluate_model(
        trained.model, ds, split=args.split, zero_shot_z=args.zero_shot
    )
    print(render_eval_report(report))
    if args.out:
        write_json_atomic(args.out, report.to_dict())
        print(f"wrote report to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = SweepSpec.from_dict(_load_json(args.config))
    if args.seed is not None:
        spec.seed = args.seed
    if args.max_trials is not None:
        spec.max_trials = args.max_trials
    spec.validate()
    threads = args.threads if args.threads is not None else _default_threads()
    summary = run_sweep(spec, args.out, threads=threads)
    winner = summary["winner"]
    print(
        f"ran {summary['n_trials']} trials; winner trial {winner['trial']} "
        f"{winner['overrides']} val mse {winner['mean_val_mse']:.6g}"
    )
    agg = winner["test_sqrt_pehe"]
    print(
        f"winner test sqrt_pehe {agg['mean']:.4f} +/- {agg['std']:.4f} (n={agg['n']})"
    )
    print(f"test truth reads before selection: {summary['test_truth_reads_before_selection']}")
    return EXIT_OK


def cmd_report(args) -> int:
    records: list[RunRecord] = []
    for path in args.records:
        doc = _load_json(path)
        kind = doc.get("kind")
        if kind == "run_record":
            records.append(RunRecord.from_dict(doc))
        elif kind == "eval_report":
            report = EvalReport.from_dict(doc)
            label = os.path.splitext(os.path.basename(path))[0]
            records.append(
                RunRecord(
                    label=label,
                    config_hash="",
                    config={},
                    per_seed=[report],
                    aggregate={"sqrt_pehe": {"mean": report.sqrt_pehe, "std": 0.0, "n": 1}},
                    wall_clock_s=0.0,
                )
            )
        else:
            raise DataError(f"{path}: not a run record or eval report")
    print(render_report_table(records))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(report_table_csv(records))
        print(f"wrote csv to {args.csv}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ite-bench",
        description=(
            "Semi-synthetic benchmark for individual treatment effect "
            "estimation with embedding-valued treatments. Treatments are "
            "indexed 0..k-1 everywhere."
        ),
        epilog=(
            "exit codes: 0 success, 2 config error, 3 data error, "
            "4 numeric error, 1 unexpected"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset directory")
    p.add_argument("--config", help="experiment config JSON (its 'sim' section is used)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--c", type=float)
    p.add_argument("--kappa", help="scalar or comma-separated per-treatment values")
    p.add_argument("--centroid-method", choices=["random", "kmeans"], dest="centroid_method")
    p.add_argument("--covariate-file", dest="covariate_file",
                   help="CSV of embedding rows to use instead of Gaussian draws")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one model on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", required=True, help="output directory for checkpoint and history")
    p.add_argument("--variant", choices=["joint", "tarnet"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs-max", type=int, dest="epochs_max")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--zero-shot", type=int, dest="zero_shot",
                   help="also report PEHE restricted to pairs involving this treatment")
    p.add_argument("--out", help="optional path for the report JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid search selected on validation MSE")
    p.add_argument("--config", required=True, help="sweep config JSON with 'base' and 'grid'")
    p.add_argument("--out", required=True)
    p.add_argument("--max-trials", type=int, dest="max_trials",
                   help="random subsample of the grid (deterministic in --seed)")
    p.add_argument("--threads", type=int,
                   help="worker processes; default ITE_BENCH_THREADS or cpu count")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate run records into a table")
    p.add_argument("records", nargs="+", help="run record or eval report JSON files")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # pragma: no cover - defensive
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    raise SystemExit(main())
