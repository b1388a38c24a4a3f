"""Dense numeric core: MLP encoder, two-stream classifier head, losses and
hand-written backpropagation. Everything is float64 and side-effect free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, Union

import numpy as np

PROB_EPS = 1e-12
LOG_PROB_FLOOR = math.log(PROB_EPS)


class ConfigError(ValueError):
    """Shapes or hyper-parameters that cannot work together."""


@dataclass
class ParamSet:
    """Encoder layers ``[(weight, bias), ...]``, main classifier ``main`` and
    optional auxiliary classifier ``aux``.

    Weights are stored ``(fan_in, fan_out)`` so a batch maps as ``x @ w + b``.
    With ``classifier_bias`` the classifiers get one extra row that multiplies
    a constant 1 appended to the representation, so the bias lives inside the
    matrix and joins it in every norm and prototype.
    """

    encoder: list[tuple[np.ndarray, np.ndarray]]
    main: np.ndarray
    aux: np.ndarray | None = None
    classifier_bias: bool = False

    def __post_init__(self) -> None:
        d = self.encoder[-1][0].shape[1] if self.encoder else None
        rows = self.main.shape[0]
        if d is not None and rows != d + int(self.classifier_bias):
            raise ConfigError(
                f"encoder output dim {d} does not match classifier rows {rows}"
            )
        if self.aux is not None and self.aux.shape != self.main.shape:
            raise ConfigError(
                f"aux classifier shape {self.aux.shape} != main {self.main.shape}"
            )
        for i in range(1, len(self.encoder)):
            if self.encoder[i][0].shape[0] != self.encoder[i - 1][0].shape[1]:
                raise ConfigError(f"encoder layer {i} input dim mismatch")

    @property
    def in_dim(self) -> int:
        if self.encoder:
            return self.encoder[0][0].shape[0]
        return self.main.shape[0] - int(self.classifier_bias)

    @property
    def rep_dim(self) -> int:
        return self.main.shape[0] - int(self.classifier_bias)

    @property
    def n_classes(self) -> int:
        return self.main.shape[1]

    @property
    def has_aux(self) -> bool:
        return self.aux is not None

    def tensors(self) -> list[np.ndarray]:
        """Flat list in a fixed order: encoder (w, b) pairs, main, aux."""
        out: list[np.ndarray] = []
        for w, b in self.encoder:
            out.extend((w, b))
        out.append(self.main)
        if self.aux is not None:
            out.append(self.aux)
        return out

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "ParamSet":
        tensors = list(tensors)
        expected = len(self.tensors())
        if len(tensors) != expected:
            raise ConfigError(f"expected {expected} tensors, got {len(tensors)}")
        n_enc = len(self.encoder)
        encoder = [(tensors[2 * i], tensors[2 * i + 1]) for i in range(n_enc)]
        main = tensors[2 * n_enc]
        aux = tensors[2 * n_enc + 1] if self.aux is not None else None
        return ParamSet(encoder, main, aux, self.classifier_bias)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return self.with_tensors([fn(t) for t in self.tensors()])

    def copy(self) -> "ParamSet":
        return self.map(np.copy)

    def zeros_like(self) -> "ParamSet":
        return self.map(np.zeros_like)

    def without_aux(self) -> "ParamSet":
        return replace(self, aux=None)

    def congruent(self, other: "ParamSet") -> bool:
        a, b = self.tensors(), other.tensors()
        return len(a) == len(b) and all(x.shape == y.shape for x, y in zip(a, b))

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors())


# Gradients and momentum buffers share the parameter layout.
Gradients = ParamSet


def init_params(
    layer_sizes: Sequence[int],
    n_classes: int,
    rng: np.random.Generator,
    aux_rng: np.random.Generator | None = None,
    classifier_bias: bool = False,
) -> ParamSet:
    """He-normal encoder and uniform(+-1/sqrt(fan_in)) classifiers.

    ``layer_sizes`` is ``[in_dim, hidden..., rep_dim]``; a single entry means
    an identity encoder. The auxiliary classifier is drawn from ``aux_rng`` so
    that adding it never changes the encoder or main classifier draws.
    """
    if len(layer_sizes) < 1 or any(s < 1 for s in layer_sizes):
        raise ConfigError(f"bad layer sizes {list(layer_sizes)}")
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    encoder = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        encoder.append((w, np.zeros(fan_out)))
    rows = layer_sizes[-1] + int(classifier_bias)
    bound = 1.0 / math.sqrt(layer_sizes[-1])
    main = rng.uniform(-bound, bound, size=(rows, n_classes))
    aux = None
    if aux_rng is not None:
        aux = aux_rng.uniform(-bound, bound, size=(rows, n_classes))
    return ParamSet(encoder, main, aux, classifier_bias)


def _as_batch(x: np.ndarray, in_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ConfigError(f"input has shape {x.shape}, encoder expects dim {in_dim}")
    return x


def augment(h: np.ndarray, bias: bool) -> np.ndarray:
    if not bias:
        return h
    return np.concatenate([h, np.ones((h.shape[0], 1))], axis=1)


def _encode(params: ParamSet, x: np.ndarray) -> list[np.ndarray]:
    """Return the activations of every layer, input first, representation last."""
    acts = [x]
    n = len(params.encoder)
    for i, (w, b) in enumerate(params.encoder):
        pre = acts[-1] @ w + b
        acts.append(np.maximum(pre, 0.0) if i < n - 1 else pre)
    return acts


def encode(params: ParamSet, x: np.ndarray) -> np.ndarray:
    return _encode(params, _as_batch(x, params.in_dim))[-1]


def forward(params: ParamSet, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Representation and training logits.

    With an auxiliary classifier the logits are the element-wise sum of both
    heads; otherwise only the main head. A 1-D ``x`` gives 1-D outputs.
    """
    single = np.ndim(x) == 1
    h = encode(params, x)
    ha = augment(h, params.classifier_bias)
    z = ha @ params.main
    if params.aux is not None:
        z = z + ha @ params.aux
    if single:
        return h[0], z[0]
    return h, z


def inference_logits(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Logits of the main classifier only; the auxiliary head is dropped."""
    h = encode(params, x)
    return augment(h, params.classifier_bias) @ params.main


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class CrossEntropy:
    pass


@dataclass(frozen=True)
class Focal:
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError(f"focal gamma must be finite and >= 0, got {self.gamma}")


@dataclass(frozen=True)
class Ratio:
    """``(alpha + beta * ratio[y]) * CE``."""

    alpha: float = 1.0
    beta: float = 0.1
    ratio: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        r = np.asarray(self.ratio, dtype=np.float64)
        if r.ndim != 1 or r.size == 0:
            raise ConfigError("ratio vector must be a nonempty 1-D sequence")
        if not np.isfinite(r).all() or (r < 0).any():
            raise ConfigError("ratio vector entries must be finite and nonnegative")
        object.__setattr__(self, "ratio", tuple(float(v) for v in r))

    def weights(self) -> np.ndarray:
        return self.alpha + self.beta * np.asarray(self.ratio)


LossKind = Union[CrossEntropy, Focal, Ratio]


def loss_terms(z: np.ndarray, y: np.ndarray, kind: LossKind) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and their gradients w.r.t. the logits.

    ``z`` is (B, C), ``y`` is (B,). Log-probabilities are floored at
    ``log(PROB_EPS)`` for the loss value only.
    """
    y = np.asarray(y, dtype=np.int64)
    n, c = z.shape
    if y.shape != (n,) or (y < 0).any() or (y >= c).any():
        raise ConfigError(f"labels must lie in [0, {c})")
    rows = np.arange(n)
    logp_all = log_softmax(z)
    logp = logp_all[rows, y]
    ce = -np.maximum(logp, LOG_PROB_FLOOR)
    dz = np.exp(logp_all)
    dz[rows, y] -= 1.0

    if isinstance(kind, CrossEntropy) or (isinstance(kind, Focal) and kind.gamma == 0):
        return ce, dz
    if isinstance(kind, Focal):
        g = kind.gamma
        p = np.exp(logp)
        one_minus = -np.expm1(logp)
        mod = one_minus**g
        # d/dz of -(1-p)^g log p = [(1-p)^g - g (1-p)^(g-1) p log p] (softmax - onehot)
        safe = np.where(one_minus > 0, one_minus, 1.0)
        extra = np.where(one_minus > 0, g * safe ** (g - 1.0) * p * logp, 0.0)
        return mod * ce, (mod - extra)[:, None] * dz
    if isinstance(kind, Ratio):
        w = kind.weights()
        if w.size != c:
            raise ConfigError(f"ratio vector has {w.size} entries, logits have {c}")
        wy = w[y]
        return wy * ce, wy[:, None] * dz
    raise ConfigError(f"unknown loss kind {kind!r}")


def loss(z: np.ndarray, y: int, kind: LossKind = CrossEntropy()) -> float:
    """Loss of a single logit vector."""
    z = np.asarray(z, dtype=np.float64)[None, :]
    return float(loss_terms(z, np.array([y]), kind)[0][0])


def backward(
    params: ParamSet, x: np.ndarray, y: np.ndarray, kind: LossKind = CrossEntropy()
) -> tuple[float, ParamSet]:
    """Batch-mean loss and its analytic gradient for every parameter tensor.

    Both classifiers see the same logit gradient because the logits are summed.
    """
    x = _as_batch(x, params.in_dim)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if x.shape[0] == 0:
        raise ValueError("backward needs a nonempty batch")
    if y.shape[0] != x.shape[0]:
        raise ConfigError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
    n = x.shape[0]
    acts = _encode(params, x)
    ha = augment(acts[-1], params.classifier_bias)
    z = ha @ params.main
    if params.aux is not None:
        z = z + ha @ params.aux
    losses, dz = loss_terms(z, y, kind)
    dz = dz / n

    g_main = ha.T @ dz
    g_aux = ha.T @ dz if params.aux is not None else None
    dh = dz @ params.main.T
    if params.aux is not None:
        dh = dh + dz @ params.aux.T
    if params.classifier_bias:
        dh = dh[:, :-1]

    enc_grads: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(len(params.encoder) - 1, -1, -1):
        w, _ = params.encoder[i]
        if i < len(params.encoder) - 1:
            dh = dh * (acts[i + 1] > 0)
        enc_grads.append((acts[i].T @ dh, dh.sum(axis=0)))
        dh = dh @ w.T
    enc_grads.reverse()
    return float(losses.mean()), ParamSet(enc_grads, g_main, g_aux, params.classifier_bias)


def classifier_gradient(params: ParamSet, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the main classifier of the batch-mean CE of the main
    head alone (auxiliary head ignored, encoder held fixed)."""
    x = _as_batch(x, params.in_dim)
    if x.shape[0] == 0:
        raise ValueError("classifier_gradient needs a nonempty batch")
    return head_gradient(params, encode(params, x), y)


def head_gradient(params: ParamSet, h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Same as :func:`classifier_gradient` but from precomputed representations."""
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    ha = augment(h, params.classifier_bias)
    _, dz = loss_terms(ha @ params.main, y, CrossEntropy())
    return ha.T @ (dz / h.shape[0])


def momentum_update(
    p: np.ndarray, g: np.ndarray, v: np.ndarray | None, lr: float, momentum: float
) -> tuple[np.ndarray, np.ndarray]:
    """One heavy-ball step on a single tensor: ``v = m v + g; p = p - lr v``."""
    v = g.copy() if v is None else momentum * v + g
    return p - lr * v, v


def sgd_step(
    params: ParamSet,
    grads: ParamSet,
    lr: float,
    momentum_state: ParamSet | None = None,
    momentum: float = 0.0,
) -> tuple[ParamSet, ParamSet]:
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
    if not params.congruent(grads):
        raise ConfigError("gradient layout does not match parameters")
    if momentum_state is not None and not params.congruent(momentum_state):
        raise ConfigError("momentum state layout does not match parameters")
    vs = momentum_state.tensors() if momentum_state is not None else [None] * len(params.tensors())
    new_p, new_v = [], []
    for p, g, v in zip(params.tensors(), grads.tensors(), vs):
        p2, v2 = momentum_update(p, g, v, lr, momentum)
        new_p.append(p2)
        new_v.append(v2)
    return params.with_tensors(new_p), params.with_tensors(new_v)


def frobenius_norm(m: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(m))))
