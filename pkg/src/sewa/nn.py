"""Dense feed-forward network with hand-written backprop.

Parameters live in one flat float64 vector. Flattening order is layer by
layer; within a layer the weight matrix of shape ``(fan_in, fan_out)`` in
row-major order, then the ``fan_out`` biases. Checkpoint files depend on this
order bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("relu", "tanh", "identity")
LOSSES = ("cross_entropy_softmax", "mse", "logistic_binary")


class DimensionMismatchError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    loss_kind: str = "cross_entropy_softmax"
    bias: bool = True

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"layer_sizes must have >= 2 positive entries, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss_kind not in LOSSES:
            raise ValueError(f"unknown loss {self.loss_kind!r}")
        if self.loss_kind == "logistic_binary" and sizes[-1] != 1:
            raise ValueError("logistic_binary needs a single output unit")
        if self.loss_kind == "cross_entropy_softmax" and sizes[-1] < 2:
            raise ValueError("cross_entropy_softmax needs >= 2 output units")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(a * b + (b if self.bias else 0) for a, b in zip(s[:-1], s[1:]))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class DatasetSplit:
    """Features ``(n, p)`` and labels (class indices or float targets)."""

    features: np.ndarray
    labels: np.ndarray
    max_norm: float = field(init=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty (n, p) array")
        self.labels = np.asarray(self.labels)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} samples"
            )
        self.max_norm = float(np.sqrt((self.features**2).sum(axis=1)).max())

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> DatasetSplit:
        return DatasetSplit(self.features[idx], self.labels[idx])

    def check(self, spec: MlpSpec) -> None:
        if self.p != spec.n_in:
            raise DimensionMismatchError(
                f"layer 0: input width {spec.n_in} but data has {self.p} features"
            )
        if spec.loss_kind == "cross_entropy_softmax":
            lab = self.labels
            if not np.issubdtype(lab.dtype, np.integer) or lab.min() < 0 or lab.max() >= spec.n_out:
                raise ValueError(f"class labels must be integers in [0, {spec.n_out})")
        elif spec.loss_kind == "logistic_binary":
            if not np.all((self.labels == 0) | (self.labels == 1)):
                raise ValueError("logistic_binary labels must be 0 or 1")


def unpack(w: np.ndarray, spec: MlpSpec) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Views ``(W, b)`` per layer into the flat vector ``w``."""
    if w.ndim != 1 or w.shape[0] != spec.n_params:
        raise DimensionMismatchError(
            f"weight vector has {w.size} entries, spec needs {spec.n_params}"
        )
    layers = []
    pos = 0
    s = spec.layer_sizes
    for a, b in zip(s[:-1], s[1:]):
        W = w[pos : pos + a * b].reshape(a, b)
        pos += a * b
        bias = None
        if spec.bias:
            bias = w[pos : pos + b]
            pos += b
        layers.append((W, bias))
    return layers


def mlp_init(spec: MlpSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases; bit-identical for equal ``(spec, seed)``."""
    rng = np.random.Generator(np.random.PCG64(seed & ((1 << 64) - 1)))
    w = np.zeros(spec.n_params)
    for W, _ in unpack(w, spec):
        fan_in, fan_out = W.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return w


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _forward(w, spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise DimensionMismatchError(
            f"layer 0: expected input of width {spec.n_in}, got shape {x.shape}"
        )
    layers = unpack(np.asarray(w, dtype=np.float64), spec)
    zs, acts = [], [x]
    a = x
    for i, (W, b) in enumerate(layers):
        z = a @ W
        if b is not None:
            z = z + b
        zs.append(z)
        a = z if i == len(layers) - 1 else _act(z, spec.activation)
        acts.append(a)
    return layers, zs, acts


def mlp_forward(w: np.ndarray, spec: MlpSpec, x_batch: np.ndarray) -> np.ndarray:
    """Logits of shape ``(b, n_out)``; no output activation."""
    return _forward(w, spec, x_batch)[2][-1]


def _first_nonfinite(acts):
    for i, a in enumerate(acts[1:]):
        if not np.all(np.isfinite(a)):
            return i
    return None


def _loss_terms(z, labels, kind):
    """Per-sample losses and d(sum of losses)/dz."""
    if kind == "cross_entropy_softmax":
        y = labels.astype(np.intp)
        zmax = z.max(axis=1, keepdims=True)
        shifted = z - zmax
        lse = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(z.shape[0])
        per = lse - shifted[rows, y]
        dz = np.exp(shifted - lse[:, None])
        dz[rows, y] -= 1.0
        return per, dz
    if kind == "mse":
        y = labels.astype(np.float64).reshape(z.shape[0], -1)
        r = z - y
        return (r * r).sum(axis=1), 2.0 * r
    # logistic_binary
    y = labels.astype(np.float64).reshape(-1, 1)
    per = np.logaddexp(0.0, z) - y * z
    return per[:, 0], expit(z) - y


def _raise_nonfinite(acts, what):
    layer = _first_nonfinite(acts)
    where = f"output of layer {layer}" if layer is not None else "loss reduction"
    raise NonFiniteLossError(f"non-finite {what}; first non-finite value in {where}")


def loss(w: np.ndarray, spec: MlpSpec, data: DatasetSplit) -> float:
    _, _, acts = _forward(w, spec, data.features)
    per, _ = _loss_terms(acts[-1], data.labels, spec.loss_kind)
    value = float(per.mean())
    if not np.isfinite(value):
        _raise_nonfinite(acts, "loss")
    return value


def loss_and_grad(w: np.ndarray, spec: MlpSpec, data: DatasetSplit) -> tuple[float, np.ndarray]:
    """Mean loss over ``data`` and its exact gradient w.r.t. the flat weights."""
    layers, zs, acts = _forward(w, spec, data.features)
    per, dz = _loss_terms(acts[-1], data.labels, spec.loss_kind)
    n = data.n
    value = float(per.mean())
    if not np.isfinite(value):
        _raise_nonfinite(acts, "loss")

    grad = np.empty(spec.n_params)
    grads = unpack(grad, spec)
    delta = dz / n
    for i in range(len(layers) - 1, -1, -1):
        gW, gb = grads[i]
        np.matmul(acts[i].T, delta, out=gW)
        if gb is not None:
            gb[...] = delta.sum(axis=0)
        if i:
            delta = (delta @ layers[i][0].T) * _act_grad(zs[i - 1], acts[i], spec.activation)
    return value, grad


def accuracy(w: np.ndarray, spec: MlpSpec, data: DatasetSplit) -> float:
    """Classification accuracy; NaN for regression."""
    z = mlp_forward(w, spec, data.features)
    if spec.loss_kind == "cross_entropy_softmax":
        return float(np.mean(z.argmax(axis=1) == data.labels))
    if spec.loss_kind == "logistic_binary":
        return float(np.mean((z[:, 0] > 0) == (data.labels == 1)))
    return float("nan")
