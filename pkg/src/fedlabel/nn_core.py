"""Small numpy neural-network engine: dense and 1-D conv layers, manual
backpropagation, Adam and early-stopped mini-batch training.

Everything is float64. Networks are plain values; the public operations
(:func:`adam_step`, :func:`train`) return new networks and never mutate
their inputs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DENSE = "dense"
CONV1D = "conv1d"
RELU = "relu"
SOFTMAX = "softmax"
NONE = "none"

LOG_EPS = 1e-12


class DimensionError(ValueError):
    """Raised when array shapes do not line up with a network or each other."""


class InvalidInputError(ValueError):
    """Raised for empty or otherwise unusable training data."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int
    activation: str = RELU
    kernel_width: int | None = None

    def __post_init__(self):
        if self.kind not in (DENSE, CONV1D):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in (RELU, SOFTMAX, NONE):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.units < 1:
            raise ValueError("units must be positive")
        if self.kind == CONV1D:
            if self.kernel_width is None or self.kernel_width < 1:
                raise ValueError("Conv1D needs kernel_width >= 1")
        elif self.kernel_width is not None:
            raise ValueError("kernel_width only applies to Conv1D")


@dataclass(frozen=True)
class ModelSpec:
    """Layer stack plus the label ids its output columns stand for.

    Conv1D layers read the flat input as ``channels`` equal-length sequences
    (x || y || z for accelerometer features) and must come before any Dense
    layer; the conv output is flattened ahead of the first Dense layer.
    """

    layers: tuple[LayerSpec, ...]
    labels: tuple[int, ...]
    input_dim: int
    channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        if not self.labels or len(set(self.labels)) != len(self.labels):
            raise ValueError("output labels must be non-empty and unique")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        last = self.layers[-1]
        if last.kind != DENSE:
            raise ValueError("the final layer must be Dense")
        if last.units != len(self.labels):
            raise ValueError(
                f"final layer width {last.units} != number of labels {len(self.labels)}"
            )
        for i, layer in enumerate(self.layers[:-1]):
            if layer.activation == SOFTMAX:
                raise ValueError(f"layer {i}: softmax is only allowed on the final layer")
        seen_dense = False
        length = None
        for i, layer in enumerate(self.layers):
            if layer.kind == DENSE:
                seen_dense = True
                continue
            if seen_dense:
                raise ValueError(f"layer {i}: Conv1D cannot follow a Dense layer")
            if length is None:
                if self.input_dim % self.channels:
                    raise ValueError(
                        f"input_dim {self.input_dim} not divisible into {self.channels} channels"
                    )
                length = self.input_dim // self.channels
            if layer.kernel_width > length:
                raise ValueError(
                    f"layer {i}: kernel width {layer.kernel_width} exceeds input length {length}"
                )
            length = length - layer.kernel_width + 1

    @property
    def n_outputs(self) -> int:
        return len(self.labels)


def dense_spec(hidden: Sequence[int], labels: Sequence[int], input_dim: int) -> ModelSpec:
    """ReLU multilayer perceptron with a softmax head over ``labels``."""
    layers = [LayerSpec(DENSE, h, RELU) for h in hidden]
    layers.append(LayerSpec(DENSE, len(labels), SOFTMAX))
    return ModelSpec(tuple(layers), tuple(labels), input_dim)


def conv_spec(
    filters: Sequence[int],
    labels: Sequence[int],
    input_dim: int,
    kernel_width: int = 3,
    channels: int = 3,
) -> ModelSpec:
    """Stack of valid-padding ReLU Conv1D layers, flattened into a softmax head."""
    layers = [LayerSpec(CONV1D, f, RELU, kernel_width) for f in filters]
    layers.append(LayerSpec(DENSE, len(labels), SOFTMAX))
    return ModelSpec(tuple(layers), tuple(labels), input_dim, channels)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    patience: int = 1
    validation_fraction: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")


@dataclass
class Network:
    spec: ModelSpec
    params: list[dict[str, np.ndarray]]
    adam_m: list[dict[str, np.ndarray]] = field(default_factory=list)
    adam_v: list[dict[str, np.ndarray]] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if not self.adam_m:
            self.adam_m = _zeros_like(self.params)
        if not self.adam_v:
            self.adam_v = _zeros_like(self.params)

    @property
    def labels(self) -> tuple[int, ...]:
        return self.spec.labels

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def n_parameters(self) -> int:
        return sum(a.size for p in self.params for a in p.values())


def _zeros_like(params):
    return [{k: np.zeros_like(v) for k, v in p.items()} for p in params]


def _layer_shapes(spec: ModelSpec):
    """Yield (weight shape, bias shape, fan_in, fan_out) per layer."""
    shapes = []
    channels, length = None, None
    width = spec.input_dim
    for layer in spec.layers:
        if layer.kind == CONV1D:
            if channels is None:
                channels, length = spec.channels, spec.input_dim // spec.channels
            k = layer.kernel_width
            shapes.append(((layer.units, channels, k), (layer.units,), channels * k, layer.units * k))
            channels, length = layer.units, length - k + 1
            width = channels * length
        else:
            shapes.append(((width, layer.units), (layer.units,), width, layer.units))
            width = layer.units
    return shapes


def init_network(spec: ModelSpec, seed: int | np.random.Generator = 0) -> Network:
    """He-uniform weights for ReLU layers, Glorot-uniform otherwise, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = []
    for layer, (wshape, bshape, fan_in, fan_out) in zip(spec.layers, _layer_shapes(spec)):
        if layer.activation == RELU:
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(
            {"W": rng.uniform(-limit, limit, size=wshape), "b": np.zeros(bshape)}
        )
    return Network(spec, params)


def zero_network(spec: ModelSpec) -> Network:
    return Network(spec, [{"W": np.zeros(w), "b": np.zeros(b)} for w, b, _, _ in _layer_shapes(spec)])


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _activate(z, activation):
    if activation == RELU:
        return np.maximum(z, 0.0)
    if activation == SOFTMAX:
        return softmax(z)
    return z


def _conv_forward(x, W, b):
    # x: (N, C, T); W: (F, C, K) -> (N, F, T-K+1)
    windows = sliding_window_view(x, W.shape[2], axis=2)  # (N, C, T', K)
    return np.einsum("nctk,fck->nft", windows, W, optimize=True) + b[None, :, None]


def _conv_backward(x, W, dout):
    k = W.shape[2]
    windows = sliding_window_view(x, k, axis=2)
    dW = np.einsum("nft,nctk->fck", dout, windows, optimize=True)
    db = dout.sum(axis=(0, 2))
    dx = np.zeros_like(x)
    t_out = dout.shape[2]
    for j in range(k):
        dx[:, :, j : j + t_out] += np.einsum("nft,fc->nct", dout, W[:, :, j], optimize=True)
    return dW, db, dx


def _check_batch(net: Network, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.spec.input_dim:
        raise DimensionError(
            f"layer 0: expected input of shape (n, {net.spec.input_dim}), got {batch.shape}"
        )
    return batch


def _forward_cached(net: Network, batch: np.ndarray):
    spec = net.spec
    a = batch
    caches = []
    for i, (layer, p) in enumerate(zip(spec.layers, net.params)):
        if layer.kind == CONV1D:
            if a.ndim == 2:
                a = a.reshape(a.shape[0], spec.channels, -1)
            if a.shape[1:2] != p["W"].shape[1:2]:
                raise DimensionError(f"layer {i}: channel mismatch {a.shape} vs {p['W'].shape}")
            z = _conv_forward(a, p["W"], p["b"])
        else:
            if a.ndim == 3:
                a = a.reshape(a.shape[0], -1)
            if a.shape[1] != p["W"].shape[0]:
                raise DimensionError(f"layer {i}: width {a.shape[1]} != expected {p['W'].shape[0]}")
            z = a @ p["W"] + p["b"]
        out = _activate(z, layer.activation)
        caches.append((a, z, out))
        a = out
    return a, caches


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Scores for ``batch``: one row per sample, one column per output label."""
    batch = _check_batch(net, batch)
    out, _ = _forward_cached(net, batch)
    return out


def _check_targets(scores, targets):
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise DimensionError(f"scores {scores.shape} and targets {targets.shape} differ")
    return scores, targets


def loss_crossentropy(scores: np.ndarray, targets: np.ndarray) -> float:
    """Mean categorical cross-entropy; works for one-hot and soft targets."""
    scores, targets = _check_targets(scores, targets)
    if scores.shape[0] == 0:
        raise InvalidInputError("cross-entropy of an empty batch")
    logs = np.log(np.maximum(scores, LOG_EPS))
    return float(-(targets * logs).sum(axis=1).mean())


def backward(net: Network, batch: np.ndarray, targets: np.ndarray) -> list[dict[str, np.ndarray]]:
    """Gradients of ``loss_crossentropy(forward(net, batch), targets)``."""
    batch = _check_batch(net, batch)
    out, caches = _forward_cached(net, batch)
    _, targets = _check_targets(out, targets)
    n = batch.shape[0]
    grads: list[dict[str, np.ndarray]] = [None] * len(net.params)  # type: ignore[list-item]

    last = net.spec.layers[-1]
    if last.activation == SOFTMAX:
        # softmax + cross-entropy fuse to (p - t) for probability-vector targets
        dz = (out - targets) / n
    else:
        live = out > LOG_EPS
        dout = np.where(live, -targets / np.where(live, out, 1.0), 0.0) / n
        dz = dout * (caches[-1][1] > 0) if last.activation == RELU else dout

    for i in range(len(net.params) - 1, -1, -1):
        layer = net.spec.layers[i]
        a_in, _, _ = caches[i]
        W = net.params[i]["W"]
        if layer.kind == CONV1D:
            dW, db, da = _conv_backward(a_in, W, dz)
        else:
            dW = a_in.T @ dz
            db = dz.sum(axis=0)
            da = dz @ W.T
        grads[i] = {"W": dW, "b": db}
        if i == 0:
            break
        prev = net.spec.layers[i - 1]
        prev_z = caches[i - 1][1]
        da = da.reshape(prev_z.shape)
        if prev.activation == RELU:
            dz = da * (prev_z > 0)
        else:
            dz = da
    return grads


def _check_grads(net: Network, grads):
    if len(grads) != len(net.params):
        raise DimensionError(f"{len(grads)} gradient layers for {len(net.params)} parameter layers")
    for i, (p, g) in enumerate(zip(net.params, grads)):
        for key in ("W", "b"):
            if g[key].shape != p[key].shape:
                raise DimensionError(f"layer {i}: gradient {key} shape {g[key].shape} != {p[key].shape}")


def _adam_inplace(net: Network, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    net.step += 1
    t = net.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, m, v, g in zip(net.params, net.adam_m, net.adam_v, grads):
        for key in ("W", "b"):
            m[key] = beta1 * m[key] + (1.0 - beta1) * g[key]
            v[key] = beta2 * v[key] + (1.0 - beta2) * g[key] * g[key]
            p[key] = p[key] - lr * (m[key] / c1) / (np.sqrt(v[key] / c2) + eps)


def adam_step(
    net: Network,
    grads: list[dict[str, np.ndarray]],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Network:
    """One bias-corrected Adam update; returns a new network."""
    _check_grads(net, grads)
    out = net.copy()
    _adam_inplace(out, grads, lr, beta1, beta2, eps)
    return out


def accuracy(scores: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.argmax(scores, axis=1) == np.argmax(targets, axis=1)))


def train(
    net: Network, features: np.ndarray, targets: np.ndarray, cfg: TrainConfig
) -> tuple[Network, float]:
    """Mini-batch Adam with a held-out validation split and early stopping.

    The best-validation-loss epoch (parameters and Adam state) is restored
    before returning. Returns the trained copy and its validation loss.
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = features.shape[0] if features.ndim == 2 else 0
    if n == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if n < 2:
        raise InvalidInputError("need at least 2 samples for a validation split")
    _check_batch(net, features)
    if targets.shape != (n, net.spec.n_outputs):
        raise DimensionError(f"targets shape {targets.shape} != {(n, net.spec.n_outputs)}")

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_val = min(max(1, int(round(cfg.validation_fraction * n))), n - 1)
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_val, y_val = features[val_idx], targets[val_idx]

    work = net.copy()
    best = work.copy()
    best_loss = np.inf
    stale = 0
    for _ in range(cfg.max_epochs):
        perm = train_idx[rng.permutation(train_idx.size)]
        for start in range(0, perm.size, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            grads = backward(work, features[idx], targets[idx])
            _adam_inplace(work, grads, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        val_loss = loss_crossentropy(forward(work, x_val), y_val)
        if val_loss < best_loss:
            best_loss = val_loss
            best = work.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, float(best_loss)


def one_hot(label_ids: Sequence[int], labels: Sequence[int]) -> np.ndarray:
    """One-hot rows over the column order given by ``labels``."""
    column = {l: j for j, l in enumerate(labels)}
    label_ids = np.asarray(label_ids)
    out = np.zeros((label_ids.size, len(labels)))
    try:
        cols = [column[int(l)] for l in label_ids]
    except KeyError as exc:
        raise InvalidInputError(f"label {exc.args[0]} is not one of the output labels {tuple(labels)}") from None
    out[np.arange(label_ids.size), cols] = 1.0
    return out
