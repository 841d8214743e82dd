"""Experiment orchestration: repeated runs, hyperparameter sweeps, reports.

A sweep trains every candidate configuration on the same simulated
datasets (one per repeat seed), ranks candidates by mean validation MSE,
and only then evaluates the winner on the test split. Dataset objects
count every access to ground-truth outcome matrices, so the summary can
prove that selection never touched test-set truth.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import math
import os
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, TrainingDiverged
from .metrics import EvalReport, evaluate_model, run_zero_shot_protocol
from .model import (
    ModelShape,
    TrainConfig,
    TrainedModel,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .simulate import Dataset, SimConfig, load_dataset, save_dataset, simulate_dataset

RECORD_SCHEMA_VERSION = "1"
SWEEPABLE_SECTIONS = ("model", "train")


def write_json_atomic(path, doc) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    shape: ModelShape = field(default_factory=ModelShape)
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "joint"
    repeats: int = 1
    zero_shot: int | None = None
    label: str | None = None

    def validate(self) -> "ExperimentConfig":
        self.sim.validate()
        self.shape.validate()
        self.train.validate()
        if self.variant not in ("joint", "tarnet"):
            raise ConfigError(f"variant must be 'joint' or 'tarnet', got {self.variant!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.zero_shot is not None and not 0 <= self.zero_shot < self.sim.k:
            raise ConfigError(
                f"zero_shot treatment {self.zero_shot} out of range 0..{self.sim.k - 1}"
            )
        return self

    def effective_label(self) -> str:
        return self.label if self.label else self.variant

    def to_dict(self) -> dict:
        return {
            "sim": self.sim.to_dict(),
            "model": self.shape.to_dict(),
            "train": self.train.to_dict(),
            "variant": self.variant,
            "repeats": self.repeats,
            "zero_shot": self.zero_shot,
            "label": self.label,
        }

    @staticmethod
    def from_dict(doc: dict, path: str = "config") -> "ExperimentConfig":
        known = {"sim", "model", "train", "variant", "repeats", "zero_shot", "label"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"{path}: unknown fields {sorted(extra)}")
        cfg = ExperimentConfig(
            sim=SimConfig.from_dict(doc.get("sim", {}), path=f"{path}.sim"),
            shape=ModelShape.from_dict(doc.get("model", {}), path=f"{path}.model"),
            train=TrainConfig.from_dict(doc.get("train", {}), path=f"{path}.train"),
            variant=doc.get("variant", "joint"),
            repeats=int(doc.get("repeats", 1)),
            zero_shot=doc.get("zero_shot"),
            label=doc.get("label"),
        )
        return cfg.validate()


def config_hash(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _aggregate(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    # population standard deviation: a single seed reports std 0
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "n": int(arr.size),
    }


@dataclass
class RunRecord:
    label: str
    config_hash: str
    config: dict
    per_seed: list[EvalReport]
    aggregate: dict
    wall_clock_s: float
    artifacts: list[str] = field(default_factory=list)

    def validate(self) -> "RunRecord":
        if not self.per_seed:
            raise DataError("run record has no per-seed reports")
        roots = [r.sqrt_pehe for r in self.per_seed]
        expect = _aggregate(roots)
        got = self.aggregate.get("sqrt_pehe", {})
        for key in ("mean", "std"):
            if abs(expect[key] - got.get(key, math.nan)) > 1e-10:
                raise DataError("aggregate is inconsistent with per-seed reports")
        return self

    def to_dict(self) -> dict:
        return {
            "kind": "run_record",
            "schema_version": RECORD_SCHEMA_VERSION,
            "label": self.label,
            "config_hash": self.config_hash,
            "config": self.config,
            "per_seed": [r.to_dict() for r in self.per_seed],
            "aggregate": self.aggregate,
            "wall_clock_s": self.wall_clock_s,
            "artifacts": self.artifacts,
        }

    @staticmethod
    def from_dict(doc: dict) -> "RunRecord":
        if doc.get("schema_version") != RECORD_SCHEMA_VERSION:
            raise DataError(
                f"unsupported record schema_version {doc.get('schema_version')!r}"
            )
        record = RunRecord(
            label=doc["label"],
            config_hash=doc["config_hash"],
            config=doc["config"],
            per_seed=[EvalReport.from_dict(r) for r in doc["per_seed"]],
            aggregate=doc["aggregate"],
            wall_clock_s=float(doc.get("wall_clock_s", 0.0)),
            artifacts=list(doc.get("artifacts", [])),
        )
        return record.validate()


def make_record(
    cfg: ExperimentConfig, reports: list[EvalReport], wall_clock_s: float,
    artifacts: list[str] | None = None,
) -> RunRecord:
    aggregate = {"sqrt_pehe": _aggregate([r.sqrt_pehe for r in reports])}
    if all(r.zero_shot is not None for r in reports):
        aggregate["sqrt_pehe_zs"] = _aggregate(
            [r.zero_shot["sqrt_pehe_zs"] for r in reports]
        )
    return RunRecord(
        label=cfg.effective_label(),
        config_hash=config_hash(cfg.to_dict()),
        config=cfg.to_dict(),
        per_seed=reports,
        aggregate=aggregate,
        wall_clock_s=wall_clock_s,
        artifacts=artifacts or [],
    ).validate()


def run_experiment(
    cfg: ExperimentConfig,
    datasets: list[Dataset] | None = None,
    out_dir=None,
) -> RunRecord:
    """Train and evaluate cfg.repeats times.

    Repeat r simulates with sim.seed + r (unless datasets are supplied) and
    trains with train.seed + r. With cfg.zero_shot set, each repeat runs
    the hold-out-and-retrain protocol instead of a plain fit.
    """
    cfg.validate()
    t0 = time.perf_counter()
    reports: list[EvalReport] = []
    artifacts: list[str] = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for r in range(cfg.repeats):
        if datasets is not None:
            ds = datasets[r]
        else:
            ds = simulate_dataset(replace(cfg.sim, seed=cfg.sim.seed + r))
        train_cfg = replace(cfg.train, seed=cfg.train.seed + r)
        if cfg.zero_shot is not None:
            report, trained = run_zero_shot_protocol(
                ds, cfg.shape, train_cfg, cfg.zero_shot, cfg.variant
            )
        else:
            trained = train(ds, cfg.shape, train_cfg, cfg.variant)
            report = evaluate_model(trained.model, ds, split="test")
        reports.append(report)
        if out_dir:
            ckpt = os.path.join(out_dir, f"checkpoint_rep{r}.json")
            save_checkpoint(ckpt, trained)
            artifacts.append(ckpt)
    return make_record(cfg, reports, time.perf_counter() - t0, artifacts)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepSpec:
    base: ExperimentConfig
    grid: dict[str, list]
    max_trials: int | None = None
    seed: int = 0

    def validate(self) -> "SweepSpec":
        self.base.validate()
        if not self.grid:
            raise ConfigError("sweep grid is empty")
        for key, values in self.grid.items():
            section = key.split(".", 1)[0]
            if key != "variant" and section not in SWEEPABLE_SECTIONS:
                raise ConfigError(
                    f"grid axis {key!r} is not sweepable; use variant, "
                    f"model.<field>, or train.<field>"
                )
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError(f"grid axis {key!r} must list at least one value")
        if self.max_trials is not None and self.max_trials < 1:
            raise ConfigError("max_trials must be >= 1")
        return self

    @staticmethod
    def from_dict(doc: dict) -> "SweepSpec":
        known = {"base", "grid", "max_trials", "seed"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"sweep config: unknown fields {sorted(extra)}")
        if "base" not in doc or "grid" not in doc:
            raise ConfigError("sweep config needs 'base' and 'grid'")
        return SweepSpec(
            base=ExperimentConfig.from_dict(doc["base"], path="base"),
            grid=dict(doc["grid"]),
            max_trials=doc.get("max_trials"),
            seed=int(doc.get("seed", 0)),
        ).validate()


def expand_grid(grid: dict[str, list]) -> list[dict]:
    """Cartesian product of grid axes in sorted-key order."""
    keys = sorted(grid)
    points = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        points.append(dict(zip(keys, combo)))
    return points


def apply_overrides(base: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    doc = base.to_dict()
    for key, value in overrides.items():
        if key == "variant":
            doc["variant"] = value
            continue
        section, _, fname = key.partition(".")
        if not fname or section not in SWEEPABLE_SECTIONS:
            raise ConfigError(f"cannot apply override {key!r}")
        if fname not in doc[section]:
            raise ConfigError(f"override {key!r} names an unknown field")
        doc[section][fname] = value
    return ExperimentConfig.from_dict(doc)


def default_search_grid() -> dict[str, list]:
    """The documented search space for the representation models."""
    return {
        "model.cov_layers": [4, 6, 8],
        "model.cov_width": [200, 400, 600],
        "model.treat_layers": [4, 6, 8],
        "model.treat_width": [200, 400, 600],
        "model.head_layers": [4, 6, 8],
        "model.head_width": [200, 400, 600],
        "model.activation": ["tanh", "elu"],
        "train.alpha": [0.5, 1.0],
        "train.beta": [0.5],
        "train.batch_size": [256, 512],
        "train.base_lr": [0.1, 0.01],
        "train.scheduler_step": [10, 15],
    }


def _trial_val_mse(trained: TrainedModel) -> float:
    return math.inf if trained.best_val_mse is None else trained.best_val_mse


def _run_trial(
    trial_index: int,
    cfg: ExperimentConfig,
    overrides: dict,
    datasets: list[Dataset],
    trial_dir,
) -> dict:
    """Train one configuration on every repeat dataset; never touches test truth."""
    os.makedirs(trial_dir, exist_ok=True)
    t0 = time.perf_counter()
    val_mse: list[float] = []
    checkpoints: list[str] = []
    status = "ok"
    message = ""
    try:
        for r, ds in enumerate(datasets):
            train_cfg = replace(cfg.train, seed=cfg.train.seed + r)
            if cfg.zero_shot is not None:
                fit_ds = ds.without_treatment_in_fit(cfg.zero_shot)
            else:
                fit_ds = ds
            trained = train(fit_ds, cfg.shape, train_cfg, cfg.variant)
            val_mse.append(_trial_val_mse(trained))
            ckpt = os.path.join(trial_dir, f"checkpoint_rep{r}.json")
            save_checkpoint(ckpt, trained)
            checkpoints.append(ckpt)
    except TrainingDiverged as exc:
        status = "diverged"
        message = str(exc)
    record = {
        "trial": trial_index,
        "overrides": overrides,
        "config_hash": config_hash(cfg.to_dict()),
        "status": status,
        "message": message,
        "val_mse": val_mse,
        "mean_val_mse": float(np.mean(val_mse)) if val_mse and status == "ok" else None,
        "checkpoints": checkpoints,
        "wall_clock_s": time.perf_counter() - t0,
    }
    write_json_atomic(os.path.join(trial_dir, "record.json"), record)
    return record


_worker_dataset_cache: dict[str, Dataset] = {}


def _load_dataset_cached(path: str) -> Dataset:
    if path not in _worker_dataset_cache:
        _worker_dataset_cache[path] = load_dataset(path)
    return _worker_dataset_cache[path]


def _trial_worker(payload: tuple) -> dict:
    trial_index, base_doc, overrides, dataset_dirs, trial_dir = payload
    base = ExperimentConfig.from_dict(base_doc)
    cfg = apply_overrides(base, overrides)
    datasets = [_load_dataset_cached(p) for p in dataset_dirs]
    return _run_trial(trial_index, cfg, overrides, datasets, trial_dir)


def run_sweep(spec: SweepSpec, out_dir, threads: int = 1) -> dict:
    """Grid search ranked by validation MSE; test truth is read only for the
    winner, after selection. Returns the summary document (also written to
    out_dir/summary.json)."""
    spec.validate()
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    t0 = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)

    # one dataset per repeat, shared by every trial
    datasets: list[Dataset] = []
    dataset_dirs: list[str] = []
    for r in range(spec.base.repeats):
        ds_dir = os.path.join(out_dir, "datasets", f"rep{r}")
        ds = simulate_dataset(replace(spec.base.sim, seed=spec.base.sim.seed + r))
        if not os.path.exists(os.path.join(ds_dir, "manifest.json")):
            save_dataset(ds, ds_dir, force=True)
        datasets.append(ds)
        dataset_dirs.append(ds_dir)

    points = expand_grid(spec.grid)
    if spec.max_trials is not None and spec.max_trials < len(points):
        points = random.Random(spec.seed).sample(points, spec.max_trials)

    trials_root = os.path.join(out_dir, "trials")
    records: list[dict] = []
    if threads == 1:
        for i, overrides in enumerate(points):
            cfg = apply_overrides(spec.base, overrides)
            records.append(
                _run_trial(i, cfg, overrides, datasets, os.path.join(trials_root, f"trial_{i:04d}"))
            )
    else:
        payloads = [
            (i, spec.base.to_dict(), overrides, dataset_dirs,
             os.path.join(trials_root, f"trial_{i:04d}"))
            for i, overrides in enumerate(points)
        ]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_trial_worker, payloads))

    ok = [r for r in records if r["status"] == "ok"]
    if not ok:
        raise DataError("every sweep trial diverged; nothing to select")
    winner = min(ok, key=lambda r: (r["mean_val_mse"], r["trial"]))

    # selection is now frozen; count how often test truth was read so far
    audit_reads = sum(ds.truth_reads.get("test", 0) for ds in datasets)

    winner_cfg = apply_overrides(spec.base, winner["overrides"])
    reports = []
    for r, ds in enumerate(datasets):
        trained = load_checkpoint(winner["checkpoints"][r])
        report = evaluate_model(
            trained.model, ds, split="test", zero_shot_z=winner_cfg.zero_shot
        )
        reports.append(report)
    winner_record = make_record(
        winner_cfg, reports, winner["wall_clock_s"], winner["checkpoints"]
    )
    write_json_atomic(os.path.join(out_dir, "winner_record.json"), winner_record.to_dict())

    summary = {
        "schema_version": RECORD_SCHEMA_VERSION,
        "n_trials": len(records),
        "trials": [
            {k: rec[k] for k in ("trial", "overrides", "status", "mean_val_mse")}
            for rec in records
        ],
        "winner": {
            "trial": winner["trial"],
            "overrides": winner["overrides"],
            "mean_val_mse": winner["mean_val_mse"],
            "test_sqrt_pehe": winner_record.aggregate["sqrt_pehe"],
        },
        "test_truth_reads_before_selection": audit_reads,
        "wall_clock_s": time.perf_counter() - t0,
    }
    write_json_atomic(os.path.join(out_dir, "summary.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# report rendering


def render_eval_report(report: EvalReport) -> str:
    lines = [
        f"split: {report.split}   n={report.n_eval}   k={report.k}",
        f"sqrt_pehe:    {report.sqrt_pehe:.6g}",
        f"epsilon_pehe: {report.epsilon_pehe:.6g}",
    ]
    for (a, b), v in sorted(report.per_pair.items()):
        lines.append(f"  pair ({a},{b}): {v:.6g}")
    if report.zero_shot is not None:
        zs = report.zero_shot
        lines.append(
            f"zero-shot z={zs['z']}: sqrt_pehe_zs={zs['sqrt_pehe_zs']:.6g} "
            f"(epsilon_zs={zs['epsilon_zs']:.6g})"
        )
    return "\n".join(lines)


def _grouped_roots(records: list[RunRecord]) -> dict[str, dict[str, list[float]]]:
    ks = {report.k for rec in records for report in rec.per_seed}
    if len(ks) > 1:
        raise DataError(
            f"records disagree on the number of treatments k={sorted(ks)}; "
            "refusing to aggregate"
        )
    grouped: dict[str, dict[str, list[float]]] = {}
    for rec in records:
        row = grouped.setdefault(rec.label, {"sqrt_pehe": [], "sqrt_pehe_zs": []})
        for report in rec.per_seed:
            row["sqrt_pehe"].append(report.sqrt_pehe)
            if report.zero_shot is not None:
                row["sqrt_pehe_zs"].append(report.zero_shot["sqrt_pehe_zs"])
    return grouped


def render_report_table(records: list[RunRecord]) -> str:
    """One row per label: mean +/- population std of test sqrt_pehe."""
    grouped = _grouped_roots(records)
    rows = []
    for label, vals in grouped.items():
        agg = _aggregate(vals["sqrt_pehe"])
        zs = _aggregate(vals["sqrt_pehe_zs"]) if vals["sqrt_pehe_zs"] else None
        rows.append((agg["mean"], label, agg, zs))
    rows.sort(key=lambda r: (r[0], r[1]))
    width = max(len("method"), max((len(r[1]) for r in rows), default=0))
    lines = [f"{'method':<{width}}  sqrt_pehe (mean +/- std over n)"]
    for _, label, agg, zs in rows:
        line = f"{label:<{width}}  {agg['mean']:.2f} +/- {agg['std']:.2f} (n={agg['n']})"
        if zs is not None:
            line += f"   zero-shot {zs['mean']:.2f} +/- {zs['std']:.2f}"
        lines.append(line)
    return "\n".join(lines)


def report_table_csv(records: list[RunRecord]) -> str:
    grouped = _grouped_roots(records)
    lines = ["label,n,sqrt_pehe_mean,sqrt_pehe_std,sqrt_pehe_zs_mean,sqrt_pehe_zs_std"]
    rows = []
    for label, vals in grouped.items():
        agg = _aggregate(vals["sqrt_pehe"])
        zs = _aggregate(vals["sqrt_pehe_zs"]) if vals["sqrt_pehe_zs"] else None
        rows.append((agg["mean"], label, agg, zs))
    rows.sort(key=lambda r: (r[0], r[1]))
    for _, label, agg, zs in rows:
        zs_mean = f"{zs['mean']!r}" if zs else ""
        zs_std = f"{zs['std']!r}" if zs else ""
        lines.append(
            f"{label},{agg['n']},{agg['mean']!r},{agg['std']!r},{zs_mean},{zs_std}"
        )
    return "\n".join(lines) + "\n"
