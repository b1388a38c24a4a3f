"""Balanced-test evaluation and run summaries."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn


@dataclass
class EvalReport:
    round: int
    overall_accuracy: float
    per_class_accuracy: list[float]
    tail_accuracy: float
    mean_loss: float

    def to_record(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "tail_accuracy": self.tail_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "test_loss": self.mean_loss,
        }


def tail_classes(train_counts: Sequence[int], fraction: float = 0.3) -> set[int]:
    """The ceil(fraction * C) classes with the fewest training samples; ties go
    to the higher class index."""
    counts = np.asarray(train_counts)
    k = math.ceil(fraction * counts.size - 1e-9)
    order = sorted(range(counts.size), key=lambda c: (counts[c], -c))
    return set(order[:k])


def predict(params: nn.ParamSet, x: np.ndarray) -> np.ndarray:
    """argmax of the main head; ``np.argmax`` resolves ties to the lowest index."""
    return np.argmax(nn.inference_logits(params, x), axis=1)


def evaluate(
    params: nn.ParamSet,
    x: np.ndarray,
    y: np.ndarray,
    tail_set: Iterable[int],
    round_index: int = 0,
) -> EvalReport:
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ValueError("empty test set")
    logits = nn.inference_logits(params, x)
    pred = np.argmax(logits, axis=1)
    hit = pred == y
    c_total = params.n_classes
    per_class = []
    for c in range(c_total):
        rows = y == c
        per_class.append(float(hit[rows].mean()) if rows.any() else math.nan)
    tails = sorted(tail_set)
    tail_acc = float(np.mean([per_class[c] for c in tails])) if tails else math.nan
    losses, _ = nn.loss_terms(logits, y, nn.CrossEntropy())
    return EvalReport(round_index, float(hit.mean()), per_class, tail_acc, float(losses.mean()))


def last_k_average(reports: Sequence[EvalReport], k: int = 10) -> dict[str, float]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(reports):
        raise ValueError(f"asked for the last {k} rounds of {len(reports)}")
    tail = reports[-k:]
    return {
        "overall_accuracy": float(np.mean([r.overall_accuracy for r in tail])),
        "tail_accuracy": float(np.mean([r.tail_accuracy for r in tail])),
    }


def write_curve_csv(path: str | Path, rows: Iterable[tuple]) -> None:
    """Rows of (seed, round, overall, tail)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "round", "overall_accuracy", "tail_accuracy"])
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
