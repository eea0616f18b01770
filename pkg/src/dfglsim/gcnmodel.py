"""Mean-aggregation GCN with manual reverse-mode gradients and Adam.

A layer consumes the embedding matrix of the previous layer's node set and
produces embeddings for its own node set::

    agg_v = mean(h_u for u in S(v))          (zero vector if S(v) is empty)
    h_v   = relu(U @ [h_v_prev ; agg_v] + b)

The prediction head is a per-node affine map on the last layer's embeddings.
Rows of the previous layer that were received from other workers are treated
as constants: no gradient flows back into them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ProtocolError

BITS_PER_VALUE = 32


@dataclass
class Hyperparams:
    lr: float = 0.01
    weight_decay: float = 3e-4
    batch_size: int = 64
    hidden_dims: tuple[int, ...] = (32, 32)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if len(self.hidden_dims) < 1 or min(self.hidden_dims) < 1:
            raise ConfigurationError("need at least one GC layer with positive width")

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims)


class ModelParams:
    """Ordered collection of named weight tensors: U1, b1, ..., UL, bL, W, c."""

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        self.tensors: dict[str, np.ndarray] = dict(tensors)

    @property
    def num_layers(self) -> int:
        return sum(1 for k in self.tensors if k.startswith("U"))

    def layer(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors[f"U{l}"], self.tensors[f"b{l}"]

    @property
    def head(self) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors["W"], self.tensors["c"]

    @property
    def dims(self) -> list[int]:
        """[d0, d1, ..., dL]."""
        L = self.num_layers
        dims = [self.tensors["U1"].shape[1] // 2]
        dims += [self.tensors[f"U{l}"].shape[0] for l in range(1, L + 1)]
        return dims

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    def unflat(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ConfigurationError(f"expected vector of length {self.size}, got {vec.shape}")
        out, pos = {}, 0
        for k, t in self.tensors.items():
            out[k] = vec[pos : pos + t.size].reshape(t.shape).copy()
            pos += t.size
        return ModelParams(out)

    def copy(self) -> "ModelParams":
        return ModelParams({k: t.copy() for k, t in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams({k: np.zeros_like(t) for k, t in self.tensors.items()})

    def scaled(self, a: float) -> "ModelParams":
        return ModelParams({k: a * t for k, t in self.tensors.items()})

    def same_shape(self, other: "ModelParams") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            self.tensors[k].shape == other.tensors[k].shape for k in self.tensors
        )

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{t.shape}" for k, t in self.tensors.items())
        return f"ModelParams({shapes})"


def init_params(d0: int, hidden_dims: Sequence[int], num_classes: int, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    dims = [d0, *hidden_dims]
    tensors: dict[str, np.ndarray] = {}
    for l in range(1, len(dims)):
        fan_in, fan_out = 2 * dims[l - 1], dims[l]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"U{l}"] = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        tensors[f"b{l}"] = np.zeros(fan_out)
    lim = np.sqrt(6.0 / (dims[-1] + num_classes))
    tensors["W"] = rng.uniform(-lim, lim, size=(num_classes, dims[-1]))
    tensors["c"] = np.zeros(num_classes)
    return ModelParams(tensors)


@dataclass
class LayerSpec:
    """Index form of one layer of a sampling plan.

    ``self_index[k]`` is the row of the previous embedding matrix holding the
    k-th target node itself; ``agg`` is the ``(n_targets, n_prev)`` mean
    operator over the sampled neighbors.
    """

    self_index: np.ndarray
    agg: np.ndarray

    @classmethod
    def from_neighbor_lists(
        cls,
        targets: Sequence[int],
        neighbor_lists: Sequence[Iterable[int]],
        prev_ids: Sequence[int],
    ) -> "LayerSpec":
        pos = {int(v): k for k, v in enumerate(prev_ids)}
        agg = np.zeros((len(targets), len(prev_ids)))
        self_index = np.empty(len(targets), dtype=np.int64)
        for k, (v, nbrs) in enumerate(zip(targets, neighbor_lists)):
            try:
                self_index[k] = pos[int(v)]
                cols = [pos[int(u)] for u in nbrs]
            except KeyError as exc:
                raise ProtocolError(f"node {exc.args[0]} has no embedding in the previous layer") from None
            if cols:
                np.add.at(agg[k], cols, 1.0 / len(cols))
        return cls(self_index=self_index, agg=agg)


@dataclass
class LayerCache:
    h_prev: np.ndarray
    concat: np.ndarray
    pre: np.ndarray
    out: np.ndarray
    spec: LayerSpec


@dataclass
class ForwardCache:
    layers: list[LayerCache] = field(default_factory=list)
    computed_rows: list[int] = field(default_factory=list)  # locally computed rows per input layer
    h_last: np.ndarray | None = None
    logits: np.ndarray | None = None


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def gc_layer_forward(
    h_prev: np.ndarray, spec: LayerSpec, U: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, LayerCache]:
    if spec.agg.shape[1] != h_prev.shape[0]:
        raise ProtocolError("layer plan does not match the previous embedding matrix")
    agg = spec.agg @ h_prev
    concat = np.concatenate([h_prev[spec.self_index], agg], axis=1)
    pre = concat @ U.T + b
    out = relu(pre)
    return out, LayerCache(h_prev=h_prev, concat=concat, pre=pre, out=out, spec=spec)


def predict(h_last: np.ndarray, W: np.ndarray, c: np.ndarray) -> np.ndarray:
    return h_last @ W.T + c


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits - logits.max(axis=1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))


def loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return 0.0
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def forward(
    params: ModelParams,
    h0: np.ndarray,
    layers: Sequence[LayerSpec],
    remote: Sequence[np.ndarray | None] | None = None,
) -> ForwardCache:
    """Run all GC layers and the head.

    ``remote[l]`` holds constant rows appended below the locally computed
    ``h^l`` before layer ``l + 1`` consumes it. Under the privacy rule
    ``remote[0]`` is always empty; the sampler, not the model, enforces that.
    """
    L = params.num_layers
    if len(layers) != L:
        raise ConfigurationError(f"plan has {len(layers)} layers, model has {L}")
    remote = list(remote) if remote is not None else [None] * L
    cache = ForwardCache()
    h = h0
    for l in range(1, L + 1):
        cache.computed_rows.append(h.shape[0])
        extra = remote[l - 1]
        if extra is not None and len(extra):
            h = np.concatenate([h, extra], axis=0)
        U, b = params.layer(l)
        h, lc = gc_layer_forward(h, layers[l - 1], U, b)
        cache.layers.append(lc)
    W, c = params.head
    cache.h_last = h
    cache.logits = predict(h, W, c)
    return cache


def backward(params: ModelParams, cache: ForwardCache, labels: np.ndarray, scale: float = 1.0) -> ModelParams:
    """Gradient of ``scale * loss(cache.logits, labels)`` w.r.t. every parameter."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    grads: dict[str, np.ndarray] = {}
    W, _ = params.head
    logits = cache.logits
    if n == 0:
        return params.zeros_like()
    probs = np.exp(_log_softmax(logits))
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= scale / n
    grads["W"] = dlogits.T @ cache.h_last
    grads["c"] = dlogits.sum(axis=0)
    dh = dlogits @ W

    L = params.num_layers
    for l in range(L, 0, -1):
        lc = cache.layers[l - 1]
        U, _ = params.layer(l)
        dpre = dh * (lc.pre > 0)
        grads[f"U{l}"] = dpre.T @ lc.concat
        grads[f"b{l}"] = dpre.sum(axis=0)
        if l == 1:
            break
        dconcat = dpre @ U
        d_prev = dconcat.shape[1] // 2
        dh_prev = np.zeros_like(lc.h_prev)
        np.add.at(dh_prev, lc.spec.self_index, dconcat[:, :d_prev])
        dh_prev += lc.spec.agg.T @ dconcat[:, d_prev:]
        dh = dh_prev[: cache.computed_rows[l - 1]]

    return ModelParams({k: grads[k] for k in params.tensors})


class OptimizerState:
    def __init__(self, params: ModelParams):
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.step = 0


def adam_step(params: ModelParams, grads: ModelParams, state: OptimizerState, hyper: Hyperparams) -> ModelParams:
    """One Adam update with L2 weight decay added to the gradient. Updates ``state`` in place."""
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    out = {}
    for k, p in params.tensors.items():
        g = grads.tensors[k] + hyper.weight_decay * p
        m = state.m.tensors[k] = b1 * state.m.tensors[k] + (1 - b1) * g
        v = state.v.tensors[k] = b2 * state.v.tensors[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out[k] = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return ModelParams(out)


def param_l2_distance(a: ModelParams, b: ModelParams) -> float:
    if not a.same_shape(b):
        raise ConfigurationError("parameter shapes differ")
    return float(np.sqrt(sum(np.sum((a.tensors[k] - b.tensors[k]) ** 2) for k in a.tensors)))


def param_size_bits(params: ModelParams) -> int:
    return params.size * BITS_PER_VALUE


def grad_norm(grads: ModelParams) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.tensors.values())))
