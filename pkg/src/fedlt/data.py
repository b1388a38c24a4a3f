"""Long-tailed synthetic data, non-i.i.d. client partitions and per-round
balanced subsets."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng as rngmod


@dataclass
class GlobalDataset:
    x: np.ndarray  # (n, dim) float64
    y: np.ndarray  # (n,) int64
    n_classes: int

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"features {self.x.shape} and labels {self.y.shape} disagree")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.y.size

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    @property
    def ir(self) -> float:
        counts = self.class_counts
        nz = counts[counts > 0]
        return float(nz.max() / nz.min())


@dataclass
class ClientShard:
    client_id: int
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    indices: np.ndarray  # positions in the global dataset

    def __len__(self) -> int:
        return self.y.size

    @property
    def per_class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    @property
    def label_set(self) -> set[int]:
        return {int(c) for c in np.flatnonzero(self.per_class_counts)}

    def class_x(self, c: int) -> np.ndarray:
        return self.x[self.y == c]


@dataclass
class BalancedSubset:
    """Exactly ``t`` shard rows (positions into the shard) per listed class."""

    per_class: dict[int, np.ndarray]
    t: int

    @property
    def classes(self) -> set[int]:
        return set(self.per_class)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def longtail_counts(n0: int, ir: float, c_total: int) -> list[int]:
    """Exponentially decaying class sizes ``n0 * ir**(-c / (C-1))``, rounded
    to nearest and floored at 1."""
    if ir < 1:
        raise ValueError(f"imbalance ratio must be >= 1, got {ir}")
    if n0 < 1 or c_total < 2:
        raise ValueError("need n0 >= 1 and at least 2 classes")
    return [
        max(1, _round_half_up(n0 * (1.0 / ir) ** (c / (c_total - 1))))
        for c in range(c_total)
    ]


def binary_imbalance_counts(
    n_head: int, ir: float, c_total: int, tail_classes: Iterable[int]
) -> list[int]:
    tails = set(int(c) for c in tail_classes)
    if ir < 1:
        raise ValueError(f"imbalance ratio must be >= 1, got {ir}")
    if not tails or len(tails) >= c_total or not tails <= set(range(c_total)):
        raise ValueError(f"tail classes {sorted(tails)} must be a nonempty proper subset")
    tail_n = max(1, _round_half_up(n_head / ir))
    return [tail_n if c in tails else n_head for c in range(c_total)]


def class_means(c_total: int, dim: int, seed: int) -> np.ndarray:
    if dim < 2:
        raise ValueError(f"feature dim must be >= 2, got {dim}")
    g = rngmod.stream(seed, rngmod.DATASET, 0)
    m = g.normal(size=(c_total, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def synth_gaussian_mixture(
    c_total: int,
    dim: int,
    counts: Sequence[int],
    seed: int,
    sigma: float = 0.8,
    split: int = 0,
) -> GlobalDataset:
    """Isotropic Gaussian blobs around unit-norm class means.

    The means depend only on ``seed``; ``split`` selects an independent sample
    stream, so a balanced test set drawn with ``split=1`` shares the means of
    the training set.
    """
    if len(counts) != c_total:
        raise ValueError(f"{len(counts)} counts for {c_total} classes")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    means = class_means(c_total, dim, seed)
    g = rngmod.stream(seed, rngmod.DATASET, 1, split)
    y = np.repeat(np.arange(c_total), counts)
    x = means[y] + sigma * g.normal(size=(y.size, dim))
    order = g.permutation(y.size)
    return GlobalDataset(x[order], y[order], c_total)


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer split of ``total`` following ``proportions`` (summing to 1);
    leftover units go to the largest fractional parts, lower index first on ties."""
    raw = proportions * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        frac = raw - base
        order = np.lexsort((np.arange(frac.size), -frac))
        base[order[:short]] += 1
    return base


def dirichlet_partition(
    ds: GlobalDataset, n_clients: int, alpha: float, seed: int
) -> list[ClientShard]:
    """Per class, split samples across clients by Dir(alpha) proportions."""
    if n_clients < 1:
        raise ValueError("need at least one client")
    if not alpha > 0:
        raise ValueError(f"Dirichlet alpha must be > 0, got {alpha}")
    g = rngmod.stream(seed, rngmod.PARTITION)
    owned: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.y == c)
        draws = g.gamma(alpha, 1.0, size=n_clients)
        total = draws.sum()
        props = draws / total if total > 0 else np.full(n_clients, 1.0 / n_clients)
        sizes = largest_remainder(idx.size, props)
        idx = g.permutation(idx)
        start = 0
        for k, s in enumerate(sizes):
            owned[k].append(idx[start : start + s])
            start += s
    shards = []
    for k in range(n_clients):
        sel = np.sort(np.concatenate(owned[k])) if owned[k] else np.zeros(0, np.int64)
        shards.append(ClientShard(k, ds.x[sel], ds.y[sel], ds.n_classes, sel))
    return shards


def sample_balanced_subset(
    shard: ClientShard, t: int | None, gen: np.random.Generator
) -> tuple[BalancedSubset, set[int]]:
    """Draw ``t`` samples without replacement from every class holding at
    least ``t``. ``t=None`` means an infinite threshold: no class qualifies."""
    if t is None:
        return BalancedSubset({}, 0), set()
    if t < 1:
        raise ValueError(f"threshold must be >= 1, got {t}")
    counts = shard.per_class_counts
    per_class = {}
    for c in range(shard.n_classes):
        if counts[c] >= t:
            rows = np.flatnonzero(shard.y == c)
            per_class[c] = np.sort(gen.choice(rows, size=t, replace=False))
    return BalancedSubset(per_class, t), set(per_class)


def load_csv_dataset(path: str | Path, n_classes: int | None = None) -> GlobalDataset:
    """Read ``label,f0,f1,...`` rows of pre-featurized data."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label" or len(header) < 3:
            raise ValueError(f"{path}:1: header must be 'label,f0,f1,...'")
        dim = len(header) - 1
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(row)}")
            try:
                ys.append(int(row[0]))
                xs.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not ys:
        raise ValueError(f"{path}: no data rows")
    y = np.array(ys, dtype=np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    return GlobalDataset(np.array(xs, dtype=np.float64), y, n_classes)


def shard_manifest(shards: Sequence[ClientShard]) -> str:
    """JSON lines of ``{"client_id", "per_class_counts"}`` for diagnostics."""
    return "".join(
        json.dumps({"client_id": s.client_id, "per_class_counts": s.per_class_counts.tolist()})
        + "\n"
        for s in shards
    )
