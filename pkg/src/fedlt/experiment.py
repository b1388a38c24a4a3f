"""Experiment configuration, per-seed simulation and on-disk artifacts."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import re
import shutil
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import rng as rngmod
from .baselines import baseline_local_train, baseline_loss, ratio_vector_oracle
from .client import LocalTrainConfig, local_train
from .data import (
    GlobalDataset,
    binary_imbalance_counts,
    dirichlet_partition,
    load_csv_dataset,
    longtail_counts,
    shard_manifest,
    synth_gaussian_mixture,
)
from .metrics import evaluate, last_k_average, tail_classes, write_curve_csv
from .nn import ConfigError, init_params
from .protocol import RoundMetrics, ServerState, run_round

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

METHODS = ("redgrape", "fedavg_ce", "fed_focal", "ratio_loss")
SWEEP_AXES = {
    "lambda": "rebalance_factor",
    "threshold_t": "threshold",
    "ir": "ir",
    "alpha": "alpha",
}
OUTPUT_ROOT_ENV = "FEDLT_OUTPUT_ROOT"
LAST_K = 10


@dataclass
class ExperimentConfig:
    method: str = "redgrape"
    # data
    dataset: str = "synthetic"  # or "csv"
    train_csv: str | None = None
    test_csv: str | None = None
    n_classes: int = 10
    dim: int = 32
    n0: int = 1000
    sigma: float = 0.8
    test_per_class: int = 500
    imbalance: str = "exponential"  # or "binary"
    ir: float = 100.0
    tail_classes: list[int] | None = None  # binary mode; None draws n_tail at random
    n_tail: int = 3
    alpha: float = 1.0
    # federation
    n_clients: int = 10
    clients_per_round: int = 10
    rounds: int = 100
    server_lr: float = 1.0
    # local training
    epochs: int = 5
    batch_size: int = 64
    local_lr: float = 0.01
    momentum: float = 0.9
    # model
    hidden: list[int] = field(default_factory=lambda: [64])
    rep_dim: int = 32
    classifier_bias: bool = False
    # method knobs
    rebalance_factor: float = 0.1
    threshold: int | None = 8  # None = infinite threshold
    disable_aux_classifier: bool = False
    disable_rebalance: bool = False
    focal_gamma: float = 2.0
    ratio_alpha: float = 1.0
    ratio_beta: float = 0.1
    ratio_vector: list[float] | None = None  # None: oracle from global counts
    # run
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs/default"
    figures: bool = True

    def validate(self) -> "ExperimentConfig":
        def need(ok: bool, key: str, msg: str) -> None:
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        need(self.method in METHODS, "method", f"must be one of {', '.join(METHODS)}")
        need(self.dataset in ("synthetic", "csv"), "dataset", "must be 'synthetic' or 'csv'")
        if self.dataset == "csv":
            need(bool(self.train_csv), "train_csv", "required when dataset = 'csv'")
            need(bool(self.test_csv), "test_csv", "required when dataset = 'csv'")
        need(self.n_classes >= 2, "n_classes", "must be >= 2")
        need(self.dim >= 2, "dim", "must be >= 2")
        need(self.n0 >= 1, "n0", "must be >= 1")
        need(self.sigma >= 0, "sigma", "must be >= 0")
        need(self.test_per_class >= 1, "test_per_class", "must be >= 1")
        need(self.imbalance in ("exponential", "binary"), "imbalance", "must be 'exponential' or 'binary'")
        need(self.ir >= 1, "ir", "must be >= 1")
        if self.imbalance == "binary" and self.tail_classes is None:
            need(1 <= self.n_tail < self.n_classes, "n_tail", "must be in [1, n_classes)")
        if self.tail_classes is not None:
            need(all(0 <= c < self.n_classes for c in self.tail_classes), "tail_classes",
                 "entries must be valid class indices")
        need(self.alpha > 0, "alpha", "must be > 0")
        need(self.n_clients >= 1, "n_clients", "must be >= 1")
        need(1 <= self.clients_per_round <= self.n_clients, "clients_per_round", "must be in [1, n_clients]")
        need(self.rounds >= 1, "rounds", "must be >= 1")
        need(self.server_lr > 0, "server_lr", "must be > 0")
        need(self.epochs >= 1, "epochs", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.local_lr > 0, "local_lr", "must be > 0")
        need(0 <= self.momentum < 1, "momentum", "must be in [0, 1)")
        need(all(h >= 1 for h in self.hidden), "hidden", "layer widths must be >= 1")
        need(self.rep_dim >= 1, "rep_dim", "must be >= 1")
        need(self.rebalance_factor >= 0, "rebalance_factor", "must be >= 0")
        need(self.threshold is None or self.threshold >= 1, "threshold", "must be >= 1 or 'inf'")
        need(self.focal_gamma >= 0, "focal_gamma", "must be >= 0")
        need(len(self.seeds) > 0, "seeds", "must be nonempty")
        need(all(s >= 0 for s in self.seeds), "seeds", "must be nonnegative")
        if self.ratio_vector is not None:
            need(len(self.ratio_vector) == self.n_classes, "ratio_vector", "needs one entry per class")
            need(all(v >= 0 for v in self.ratio_vector), "ratio_vector", "entries must be >= 0")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_ALIASES = {"lambda": "rebalance_factor", "threshold_t": "threshold"}


def coerce_value(key: str, value: Any) -> Any:
    """Convert a raw (string or TOML) value to the field's type."""
    key = _ALIASES.get(key, key)
    if key not in _FIELDS:
        raise ConfigError(f"{key}: unknown setting")
    default = getattr(ExperimentConfig(), key)
    try:
        if key == "threshold":
            if value is None or (isinstance(value, str) and value.strip().lower() in ("inf", "none")):
                return None
            if isinstance(value, float) and value == float("inf"):
                return None
            return int(value)
        if key in ("hidden", "seeds", "tail_classes"):
            if value is None:
                return None
            if isinstance(value, str):
                value = [v for v in re.split(r"[,\s]+", value.strip()) if v]
            return [int(v) for v in value]
        if key == "ratio_vector":
            if value is None:
                return None
            if isinstance(value, str):
                value = [v for v in re.split(r"[,\s]+", value.strip()) if v]
            return [float(v) for v in value]
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"not a boolean: {value!r}")
                return low in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return None if value is None else str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _key_line(text: str, key: str) -> int | None:
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, line in enumerate(text.splitlines(), start=1):
        if pat.match(line):
            return i
    return None


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Raw settings of a flat TOML file, keyed by canonical field name."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {_ALIASES.get(k, k): v for k, v in raw.items()}


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a flat TOML file, apply overrides (they win), validate.

    Errors name the file and line of the offending key where it came from the
    file.
    """
    values: dict[str, Any] = {}
    origin: dict[str, int | None] = {}
    text = ""
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
            raw = tomllib.loads(text)
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for key, value in raw.items():
            line = _key_line(text, key)
            try:
                values[_ALIASES.get(key, key)] = coerce_value(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{line}: {exc}") from None
            origin[_ALIASES.get(key, key)] = line
    for key, value in (overrides or {}).items():
        values[_ALIASES.get(key, key)] = coerce_value(key, value)
        origin[_ALIASES.get(key, key)] = None
    cfg = ExperimentConfig(**values)
    try:
        return cfg.validate()
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        line = origin.get(key)
        if path is not None and line is not None:
            raise ConfigError(f"{path}:{line}: {exc}") from None
        raise


# ---------------------------------------------------------------- simulation


@dataclass
class SeedRun:
    seed: int
    metrics: list[RoundMetrics]
    train_counts: list[int]
    tail_set: list[int]
    shard_manifest: str


def build_datasets(cfg: ExperimentConfig, seed: int) -> tuple[GlobalDataset, GlobalDataset]:
    if cfg.dataset == "csv":
        train = load_csv_dataset(cfg.train_csv, cfg.n_classes)
        test = load_csv_dataset(cfg.test_csv, cfg.n_classes)
        return train, test
    if cfg.imbalance == "binary":
        tails = cfg.tail_classes
        if tails is None:
            g = rngmod.stream(seed, rngmod.TAILS)
            tails = sorted(int(c) for c in g.choice(cfg.n_classes, cfg.n_tail, replace=False))
        counts = binary_imbalance_counts(cfg.n0, cfg.ir, cfg.n_classes, tails)
    else:
        counts = longtail_counts(cfg.n0, cfg.ir, cfg.n_classes)
    train = synth_gaussian_mixture(cfg.n_classes, cfg.dim, counts, seed, cfg.sigma, split=0)
    test = synth_gaussian_mixture(
        cfg.n_classes, cfg.dim, [cfg.test_per_class] * cfg.n_classes, seed, cfg.sigma, split=1
    )
    return train, test


def local_config(cfg: ExperimentConfig, round_index: int) -> LocalTrainConfig:
    # re-balancing starts in round 2, once a prototype table exists
    return LocalTrainConfig(
        local_lr=cfg.local_lr,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        rebalance_factor=cfg.rebalance_factor,
        threshold=cfg.threshold,
        momentum=cfg.momentum,
        rebalance_active=round_index >= 2 and not cfg.disable_rebalance,
    )


def make_trainer(cfg: ExperimentConfig, seed: int, train_counts: Sequence[int]):
    if cfg.method == "redgrape":
        def train(params, protos, shard, t):
            return local_train(params, protos, shard, local_config(cfg, t), seed, t)
        return train
    ratio = None
    if cfg.method == "ratio_loss":
        ratio = cfg.ratio_vector if cfg.ratio_vector is not None else ratio_vector_oracle(train_counts)
    kind = baseline_loss(
        cfg.method, gamma=cfg.focal_gamma, alpha=cfg.ratio_alpha, beta=cfg.ratio_beta, ratio=ratio
    )

    def train(params, protos, shard, t):
        return baseline_local_train(params, shard, kind, local_config(cfg, t), seed, t)
    return train


def run_seed(cfg: ExperimentConfig, seed: int, on_round=None) -> SeedRun:
    """Simulate every round for one seed; no files are written."""
    train, test = build_datasets(cfg, seed)
    if train.dim != test.dim:
        raise ConfigError(f"train dim {train.dim} != test dim {test.dim}")
    shards = dirichlet_partition(train, cfg.n_clients, cfg.alpha, seed)
    counts = train.class_counts.tolist()
    tails = tail_classes(counts)
    use_aux = cfg.method == "redgrape" and not cfg.disable_aux_classifier
    params = init_params(
        [train.dim, *cfg.hidden, cfg.rep_dim],
        cfg.n_classes,
        rngmod.stream(seed, rngmod.INIT, 0),
        rngmod.stream(seed, rngmod.INIT, 1) if use_aux else None,
        cfg.classifier_bias,
    )
    trainer = make_trainer(cfg, seed, counts)
    state = ServerState(params)

    def evaluate_fn(p, t):
        return evaluate(p, test.x, test.y, tails, t)

    history = []
    for _ in range(cfg.rounds):
        state, m = run_round(state, shards, trainer, cfg.clients_per_round, seed, cfg.server_lr, evaluate_fn)
        history.append(m)
        if on_round is not None:
            on_round(m)
    return SeedRun(seed, history, counts, sorted(tails), shard_manifest(shards))


def summarize(runs: Sequence[SeedRun], k: int = LAST_K) -> dict[str, Any]:
    """Mean and population stdev across seeds of the last-k-round averages."""
    per_seed = {}
    for r in runs:
        kk = min(k, len(r.metrics))
        per_seed[str(r.seed)] = last_k_average([m.eval for m in r.metrics], kk)
    out: dict[str, Any] = {"last_k": k, "per_seed": per_seed}
    for key in ("overall_accuracy", "tail_accuracy"):
        vals = [v[key] for v in per_seed.values()]
        out[key] = {"mean": statistics.fmean(vals), "std": statistics.pstdev(vals)}
    return out


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True)


def resolve_output(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _prepare_dir(out: Path) -> bool:
    """Create ``out``; return True when this call created it."""
    if out.exists():
        if any(out.iterdir()):
            raise ConfigError(f"output_dir: {out} exists and is not empty")
        return False
    out.mkdir(parents=True)
    return True


def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> dict[str, Any]:
    """Run every seed and write metrics, summary, curves, manifest (and figures).

    On failure anything written under a directory this call created is removed.
    """
    cfg.validate()
    out = resolve_output(out if out is not None else cfg.output_dir)
    created = _prepare_dir(out)
    start = time.perf_counter()
    try:
        runs = []
        curve_rows = []
        for seed in cfg.seeds:
            path = out / f"metrics_seed{seed}.jsonl"
            with path.open("w") as fh:
                run = run_seed(cfg, seed, on_round=lambda m: fh.write(_dumps(m.to_record()) + "\n"))
            (out / f"shards_seed{seed}.jsonl").write_text(run.shard_manifest)
            runs.append(run)
            curve_rows += [
                (seed, m.round, m.eval.overall_accuracy, m.eval.tail_accuracy) for m in run.metrics
            ]
            log.info("seed %d done: last round overall %.4f", seed, run.metrics[-1].eval.overall_accuracy)
        summary = summarize(runs)
        summary["method"] = cfg.method
        summary["tail_classes"] = {str(r.seed): r.tail_set for r in runs}
        summary["train_class_counts"] = {str(r.seed): r.train_counts for r in runs}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        write_curve_csv(out / "curves.csv", curve_rows)
        if cfg.figures:
            from .plotting import plot_run
            plot_run(out)
        manifest = {
            "config": cfg.to_dict(),
            "seeds": list(cfg.seeds),
            "code_version": __version__,
            "numpy_version": np.__version__,
            "wall_time_sec": time.perf_counter() - start,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return summary
    except BaseException:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise


def _value_label(v: Any) -> str:
    return "inf" if v is None else str(v)


def run_sweep(base: ExperimentConfig, axis: str, values: Sequence[Any], out: Path | None = None) -> list[dict]:
    """One experiment directory per value plus ``comparison.csv``."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis: must be one of {', '.join(SWEEP_AXES)}")
    if not values:
        raise ConfigError("values: must be nonempty")
    key = SWEEP_AXES[axis]
    cfgs = [dataclasses.replace(base, **{key: coerce_value(key, v)}).validate() for v in values]
    out = resolve_output(out if out is not None else base.output_dir)
    created = _prepare_dir(out)
    try:
        rows = []
        for cfg in cfgs:
            label = _value_label(getattr(cfg, key))
            summary = run_experiment(cfg, out / f"{axis}={label}")
            rows.append({
                "axis": axis,
                "value": label,
                "overall_mean": summary["overall_accuracy"]["mean"],
                "overall_std": summary["overall_accuracy"]["std"],
                "tail_mean": summary["tail_accuracy"]["mean"],
                "tail_std": summary["tail_accuracy"]["std"],
            })
        with (out / "comparison.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        if base.figures:
            from .plotting import plot_sweep
            plot_sweep(out)
        return rows
    except BaseException:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise
