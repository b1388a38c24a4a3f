"""Round orchestration: participant sampling, report aggregation and the
global gradient-prototype table.

Communication is in-memory. ``encode_report`` is the serialization point a
networked port would put on the wire.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import rng as rngmod
from .data import ClientShard
from .nn import ParamSet

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    pass


@dataclass
class ClientRoundReport:
    client_id: int
    local_gradients: ParamSet  # received model minus locally trained model
    local_prototypes: dict[int, np.ndarray]
    sample_count: int
    train_loss: float = math.nan


@dataclass(frozen=True)
class PrototypeEntry:
    prototype: np.ndarray
    last_updated_round: int


# class -> entry; classes nobody has reported yet are absent
PrototypeTable = Mapping[int, PrototypeEntry]


def encode_report(report: ClientRoundReport, include_prototypes: bool = True) -> bytes:
    """Deterministic wire form: one JSON header line, then raw little-endian
    float64 payload in header order."""
    tensors = report.local_gradients.tensors()
    header = {
        "client_id": report.client_id,
        "sample_count": report.sample_count,
        "has_aux": report.local_gradients.has_aux,
        "classifier_bias": report.local_gradients.classifier_bias,
        "shapes": [list(t.shape) for t in tensors],
        "train_loss": report.train_loss,
    }
    protos = sorted(report.local_prototypes.items()) if include_prototypes else []
    header["prototype_classes"] = [c for c, _ in protos]
    payload = [np.ascontiguousarray(t, dtype="<f8").tobytes() for t in tensors]
    payload += [np.ascontiguousarray(p, dtype="<f8").tobytes() for _, p in protos]
    return json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(payload)


def sample_participants(n_clients: int, k_per_round: int, gen: np.random.Generator) -> list[int]:
    """Uniform draw without replacement, returned in ascending order."""
    if not 1 <= k_per_round <= n_clients:
        raise ValueError(f"cannot sample {k_per_round} of {n_clients} clients")
    if k_per_round == n_clients:
        return list(range(n_clients))
    return sorted(int(i) for i in gen.choice(n_clients, size=k_per_round, replace=False))


def aggregation_weights(reports: Sequence[ClientRoundReport]) -> np.ndarray:
    sizes = np.array([r.sample_count for r in reports], dtype=np.float64)
    if (sizes <= 0).any():
        raise ProtocolError("every report needs a positive sample count")
    return sizes / sizes.sum()


def aggregate(
    global_params: ParamSet, reports: Sequence[ClientRoundReport], server_lr: float = 1.0
) -> ParamSet:
    """``theta - server_lr * sum_k (n_k / sum n) * g_k`` over the participants.

    Reports are reduced in ascending client id so float sums do not depend on
    arrival order.
    """
    if not reports:
        raise ProtocolError("no client reports to aggregate")
    for r in reports:
        if not global_params.congruent(r.local_gradients):
            raise ProtocolError(f"client {r.client_id} sent gradients of the wrong shape")
    reports = sorted(reports, key=lambda r: r.client_id)
    weights = aggregation_weights(reports)
    new = []
    for i, theta in enumerate(global_params.tensors()):
        acc = np.zeros_like(theta)
        for w, r in zip(weights, reports):
            acc = acc + w * r.local_gradients.tensors()[i]
        new.append(theta - server_lr * acc)
    return global_params.with_tensors(new)


def update_prototypes(
    table: PrototypeTable, reports: Sequence[ClientRoundReport], round_index: int
) -> dict[int, PrototypeEntry]:
    """Unweighted mean of the reported prototypes per class. Classes nobody
    reported this round keep their previous entry untouched."""
    grouped: dict[int, list[np.ndarray]] = {}
    for r in sorted(reports, key=lambda r: r.client_id):
        for c, proto in r.local_prototypes.items():
            if not np.isfinite(proto).all():
                raise ProtocolError(f"client {r.client_id} sent a non-finite prototype for class {c}")
            grouped.setdefault(int(c), []).append(proto)
    new = dict(table)
    for c, protos in grouped.items():
        shape = protos[0].shape
        prev = table.get(c)
        if any(p.shape != shape for p in protos) or (prev is not None and prev.prototype.shape != shape):
            raise ProtocolError(f"prototype shape mismatch for class {c}")
        acc = np.zeros(shape)
        for p in protos:
            acc = acc + p
        new[c] = PrototypeEntry(acc / len(protos), round_index)
    return new


@dataclass
class ServerState:
    params: ParamSet
    prototypes: dict[int, PrototypeEntry] = field(default_factory=dict)
    round: int = 0  # rounds completed so far


@dataclass
class RoundMetrics:
    round: int
    participants: list[int]
    skipped: list[int]
    train_loss: float
    eval: object | None = None  # metrics.EvalReport

    def to_record(self) -> dict:
        rec = {
            "round": self.round,
            "participants": self.participants,
            "skipped": self.skipped,
            "train_loss": self.train_loss,
        }
        if self.eval is not None:
            rec.update(self.eval.to_record())
        return rec


# (received params, prototype snapshot, shard, round index) -> report
TrainClient = Callable[[ParamSet, PrototypeTable, ClientShard, int], ClientRoundReport]


def run_round(
    state: ServerState,
    shards: Sequence[ClientShard],
    train_client: TrainClient,
    clients_per_round: int,
    seed: int,
    server_lr: float = 1.0,
    evaluate: Callable[[ParamSet, int], object] | None = None,
) -> tuple[ServerState, RoundMetrics]:
    """Broadcast, train the sampled clients, aggregate, refresh prototypes,
    evaluate. Any exception from a client aborts the round."""
    t = state.round + 1
    gen = rngmod.stream(seed, rngmod.PARTICIPANTS, t)
    participants = sample_participants(len(shards), clients_per_round, gen)
    snapshot = dict(state.prototypes)
    reports, skipped = [], []
    for k in participants:
        shard = shards[k]
        if len(shard) == 0:
            log.warning("round %d: client %d has no data, skipped", t, k)
            skipped.append(k)
            continue
        reports.append(train_client(state.params, snapshot, shard, t))
    if not reports:
        raise ProtocolError(f"round {t}: every sampled client was empty")
    params = aggregate(state.params, reports, server_lr)
    protos = update_prototypes(state.prototypes, reports, t)
    weights = aggregation_weights(reports)
    train_loss = float(sum(w * r.train_loss for w, r in zip(weights, reports)))
    report = evaluate(params, t) if evaluate is not None else None
    metrics = RoundMetrics(t, participants, skipped, train_loss, report)
    return ServerState(params, protos, t), metrics
