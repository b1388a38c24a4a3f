"""Single-classifier reference methods: FedAvg with cross-entropy, focal loss
and ratio-reweighted cross-entropy."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import nn
from . import rng as rngmod
from .client import LocalTrainConfig, minibatches
from .data import ClientShard
from .protocol import ClientRoundReport


def ratio_vector_oracle(global_counts: Sequence[int]) -> np.ndarray:
    """``max_j n_j / n_c``: 1 for the largest class, growing toward the tail."""
    counts = np.asarray(global_counts, dtype=np.float64)
    if counts.size == 0 or (counts <= 0).any():
        raise ValueError("class counts must all be positive")
    return counts.max() / counts


def baseline_loss(method: str, *, gamma: float = 2.0, alpha: float = 1.0,
                  beta: float = 0.1, ratio: Sequence[float] | None = None) -> nn.LossKind:
    if method == "fedavg_ce":
        return nn.CrossEntropy()
    if method == "fed_focal":
        return nn.Focal(gamma)
    if method == "ratio_loss":
        if ratio is None:
            raise nn.ConfigError("ratio_loss needs a ratio vector")
        return nn.Ratio(alpha, beta, tuple(ratio))
    raise nn.ConfigError(f"unknown baseline method {method!r}")


def baseline_local_train(
    global_params: nn.ParamSet,
    shard: ClientShard,
    kind: nn.LossKind,
    cfg: LocalTrainConfig,
    seed: int,
    round_index: int,
) -> ClientRoundReport:
    """Plain SGD(M) on the chosen loss. Reports carry no prototypes."""
    if global_params.has_aux:
        raise nn.ConfigError("baselines train a single classifier; drop the aux head")
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    loader = rngmod.stream(seed, rngmod.LOADER, round_index, shard.client_id)
    params, velocity = global_params, None
    losses = []
    for idx in minibatches(len(shard), cfg.batch_size, cfg.epochs, loader):
        batch_loss, grads = nn.backward(params, shard.x[idx], shard.y[idx], kind)
        losses.append(batch_loss)
        params, velocity = nn.sgd_step(params, grads, cfg.local_lr, velocity, cfg.momentum)
    delta = global_params.with_tensors(
        [g - p for g, p in zip(global_params.tensors(), params.tensors())]
    )
    return ClientRoundReport(
        shard.client_id, delta, {}, len(shard), float(np.mean(losses)) if losses else math.nan
    )
