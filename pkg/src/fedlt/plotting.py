"""Accuracy-curve figures written next to a run's CSV output."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def read_curves(path: str | Path) -> dict[int, dict[str, np.ndarray]]:
    """``curves.csv`` -> {seed: {"round", "overall", "tail"}}."""
    rows = defaultdict(list)
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows[int(rec["seed"])].append(
                (int(rec["round"]), float(rec["overall_accuracy"]), float(rec["tail_accuracy"]))
            )
    out = {}
    for seed, recs in rows.items():
        arr = np.array(sorted(recs))
        out[seed] = {"round": arr[:, 0].astype(int), "overall": arr[:, 1], "tail": arr[:, 2]}
    return out


def _mean_curve(curves: dict[int, dict[str, np.ndarray]], key: str) -> tuple[np.ndarray, np.ndarray]:
    seeds = sorted(curves)
    n = min(len(curves[s]["round"]) for s in seeds)
    return curves[seeds[0]]["round"][:n], np.mean([curves[s][key][:n] for s in seeds], axis=0)


def plot_run(run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    curves = read_curves(run_dir / "curves.csv")
    fig_dir = run_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    target = fig_dir / "accuracy.png"
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8), sharex=True)
        for ax, key, title in zip(axes, ("overall", "tail"), ("balanced test", "tail classes")):
            for seed in sorted(curves):
                ax.plot(curves[seed]["round"], 100 * curves[seed][key], lw=0.7, alpha=0.35)
            r, m = _mean_curve(curves, key)
            ax.plot(r, 100 * m, color="k", lw=1.4, label="mean over seeds")
            ax.set_xlabel("round")
            ax.set_ylabel("accuracy (%)")
            ax.set_title(title)
        axes[0].legend(frameon=False)
        fig.savefig(target)
        plt.close(fig)
    return target


def plot_sweep(sweep_dir: str | Path) -> Path:
    sweep_dir = Path(sweep_dir)
    runs = sorted(p for p in sweep_dir.iterdir() if (p / "curves.csv").exists())
    fig_dir = sweep_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    target = fig_dir / "sweep.png"
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8), sharex=True)
        for run in runs:
            curves = read_curves(run / "curves.csv")
            for ax, key in zip(axes, ("overall", "tail")):
                r, m = _mean_curve(curves, key)
                ax.plot(r, 100 * m, lw=1.2, label=run.name)
        for ax, title in zip(axes, ("balanced test", "tail classes")):
            ax.set_xlabel("round")
            ax.set_ylabel("accuracy (%)")
            ax.set_title(title)
        axes[0].legend(frameon=False)
        fig.savefig(target)
        plt.close(fig)
    return target
