"""Local training with classifier re-balancing.

The encoder and the auxiliary classifier follow plain instance-balanced
SGD(M) on the summed logits. The main classifier additionally receives a
balanced-gradient term built from the client's own per-class gradients (for
classes it holds at least ``threshold`` samples of) and the server's global
gradient prototypes for every other class, rescaled to a fixed fraction of
the batch-gradient norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Mapping

import numpy as np

from . import nn
from . import rng as rngmod
from .data import BalancedSubset, ClientShard, sample_balanced_subset
from .protocol import ClientRoundReport, PrototypeTable

NORM_GUARD = 1e-12


@dataclass(frozen=True)
class LocalTrainConfig:
    local_lr: float = 0.01
    epochs: int = 5
    batch_size: int = 64
    rebalance_factor: float = 0.1
    threshold: int | None = 8  # None: only prototypes are used
    momentum: float = 0.9
    rebalance_active: bool = True

    def __post_init__(self) -> None:
        if not self.local_lr > 0:
            raise nn.ConfigError("local_lr must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise nn.ConfigError("batch_size and epochs must be >= 1")
        if self.rebalance_factor < 0:
            raise nn.ConfigError("rebalance_factor must be >= 0")
        if self.threshold is not None and self.threshold < 1:
            raise nn.ConfigError("threshold must be >= 1")
        if not 0 <= self.momentum < 1:
            raise nn.ConfigError("momentum must be in [0, 1)")


@dataclass
class MixedBalancedGradient:
    matrix: np.ndarray
    real_classes: set[int]
    proto_classes: set[int]


def minibatches(n: int, batch_size: int, epochs: int, gen: np.random.Generator) -> Iterator[np.ndarray]:
    """Fresh permutation every epoch; the short last batch is kept."""
    for _ in range(epochs):
        order = gen.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def compute_local_prototypes(params: nn.ParamSet, shard: ClientShard) -> dict[int, np.ndarray]:
    """Per local class, gradient of the class-mean CE of the main head w.r.t.
    the main classifier, at the parameters as received."""
    h = nn.encode(params, shard.x)
    out = {}
    for c in sorted(shard.label_set):
        rows = shard.y == c
        out[c] = nn.head_gradient(params, h[rows], shard.y[rows])
    return out


def real_class_gradients(
    params: nn.ParamSet, shard: ClientShard, subset: BalancedSubset
) -> dict[int, np.ndarray]:
    if not subset.per_class:
        return {}
    classes = sorted(subset.per_class)
    rows = np.concatenate([subset.per_class[c] for c in classes])
    ha = nn.augment(nn.encode(params, shard.x[rows]), params.classifier_bias)
    _, dz = nn.loss_terms(ha @ params.main, shard.y[rows], nn.CrossEntropy())
    # every class holds exactly t rows, so the per-class products stack
    k, t = len(classes), subset.t
    grads = np.matmul(ha.reshape(k, t, -1).transpose(0, 2, 1), dz.reshape(k, t, -1) / t)
    return dict(zip(classes, grads))


def real_class_gradient(
    params: nn.ParamSet, shard: ClientShard, subset: BalancedSubset, c: int
) -> np.ndarray:
    if c not in subset.per_class:
        raise KeyError(f"class {c} is not in the balanced subset")
    rows = subset.per_class[c]
    return nn.classifier_gradient(params, shard.x[rows], shard.y[rows])


def mixed_balanced_gradient(
    real_grads: Mapping[int, np.ndarray],
    prototypes: PrototypeTable,
    n_classes: int,
    shape: tuple[int, ...] | None = None,
) -> MixedBalancedGradient:
    """Average over all classes of the local gradient where available, else
    the global prototype; a class with neither contributes zero."""
    if shape is None:
        some = next(iter(real_grads.values()), None)
        if some is None:
            some = next(iter(prototypes.values())).prototype if prototypes else None
        if some is None:
            raise ValueError("cannot infer gradient shape from empty inputs")
        shape = some.shape
    acc = np.zeros(shape)
    real, proto = set(), set()
    for c in range(n_classes):
        if c in real_grads:
            acc = acc + real_grads[c]
            real.add(c)
        else:
            proto.add(c)
            entry = prototypes.get(c)
            if entry is not None:
                acc = acc + entry.prototype
    return MixedBalancedGradient(acc / n_classes, real, proto)


def rebalance_direction(g_local: np.ndarray, g_bal: np.ndarray, factor: float) -> np.ndarray:
    """``g_local + factor * g_bal * |g_local| / |g_bal|`` (Frobenius norms).

    The balanced term is skipped when ``factor`` is 0 or ``|g_bal|`` falls
    under ``NORM_GUARD``.
    """
    if g_local.shape != g_bal.shape:
        raise nn.ConfigError(f"gradient shapes {g_local.shape} and {g_bal.shape} differ")
    if factor < 0:
        raise nn.ConfigError("rebalance factor must be >= 0")
    peak = float(np.max(np.abs(g_bal))) if g_bal.size else 0.0
    if factor == 0 or peak == 0:
        return g_local
    # Dividing by the peak first makes the result bit-identical for any exactly
    # rescaled g_bal: (s*a)/(s*b) rounds the same real quotient as a/b.
    unit = g_bal / peak
    n_unit = nn.frobenius_norm(unit)
    if peak * n_unit < NORM_GUARD:
        return g_local
    coef = factor * (nn.frobenius_norm(g_local) / n_unit)
    return g_local + coef * unit


def rebalanced_w_step(
    w: np.ndarray, g_local: np.ndarray, g_bal: np.ndarray, lr: float, factor: float
) -> np.ndarray:
    """Momentum-free form of the main-classifier update."""
    return w - lr * rebalance_direction(g_local, g_bal, factor)


def local_train(
    global_params: nn.ParamSet,
    prototypes: PrototypeTable,
    shard: ClientShard,
    cfg: LocalTrainConfig,
    seed: int,
    round_index: int,
) -> ClientRoundReport:
    """One client's round. Prototypes are taken at the received model before
    any local step; the balanced subset is drawn once per round."""
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    local_protos = compute_local_prototypes(global_params, shard)
    loader = rngmod.stream(seed, rngmod.LOADER, round_index, shard.client_id)
    rebalance = cfg.rebalance_active and cfg.rebalance_factor > 0
    subset = None
    if rebalance:
        subset_gen = rngmod.stream(seed, rngmod.BALANCED, round_index, shard.client_id)
        subset, _ = sample_balanced_subset(shard, cfg.threshold, subset_gen)

    params, velocity = global_params, None
    losses = []
    for idx in minibatches(len(shard), cfg.batch_size, cfg.epochs, loader):
        batch_loss, grads = nn.backward(params, shard.x[idx], shard.y[idx], nn.CrossEntropy())
        losses.append(batch_loss)
        if rebalance:
            real = real_class_gradients(params, shard, subset)
            mixed = mixed_balanced_gradient(real, prototypes, params.n_classes, params.main.shape)
            w_grad = rebalance_direction(grads.main, mixed.matrix, cfg.rebalance_factor)
            grads = replace(grads, main=w_grad)
        params, velocity = nn.sgd_step(params, grads, cfg.local_lr, velocity, cfg.momentum)

    delta = global_params.with_tensors(
        [g - p for g, p in zip(global_params.tensors(), params.tensors())]
    )
    return ClientRoundReport(
        shard.client_id, delta, local_protos, len(shard), float(np.mean(losses)) if losses else math.nan
    )
