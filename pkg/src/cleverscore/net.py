"""Dense feedforward classifiers: inference, margin gradients and a small trainer.

All arithmetic is float64. Networks are immutable after construction; every
evaluation allocates its own scratch arrays, so a single :class:`Network` may be
shared between threads or processes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "softplus", "brelu")


class ShapeError(ValueError):
    """Input vector or weight shapes do not chain."""


class InvalidTargetError(ValueError):
    """Requested margin between a class and itself, or a class out of range."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class ModelFormatError(ValueError):
    """Malformed model JSON."""


@dataclass(frozen=True)
class Activation:
    kind: str = "identity"
    cap: float = 1.0

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {ACTIVATIONS}")
        if self.kind == "brelu" and not self.cap > 0:
            raise ValueError("bounded ReLU cap must be positive")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return z
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "softplus":
            return np.logaddexp(0.0, z)
        return np.clip(z, 0.0, self.cap)

    def derivative(self, z: np.ndarray) -> np.ndarray:
        # kinks get derivative 0 (off side)
        if self.kind == "identity":
            return np.ones_like(z)
        if self.kind == "relu":
            return (z > 0).astype(np.float64)
        if self.kind == "softplus":
            return 0.5 * (1.0 + np.tanh(0.5 * z))
        return ((z > 0) & (z < self.cap)).astype(np.float64)

    def kinks(self) -> tuple[float, ...]:
        if self.kind == "relu":
            return (0.0,)
        if self.kind == "brelu":
            return (0.0, self.cap)
        return ()


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = field(default_factory=Activation)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {w.shape}")
        if w.shape[0] != b.shape[0]:
            raise ShapeError(f"weights have {w.shape[0]} rows but bias has length {b.shape[0]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class Network:
    """A chain of dense layers mapping ``R^d`` to ``K`` logits."""

    layers: tuple[DenseLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("network needs at least one layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer {i} outputs {a.out_dim} values but layer {i + 1} expects {b.in_dim}")
        if layers[-1].activation.kind != "identity":
            raise ShapeError("final layer must use the identity activation (outputs are logits)")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def hidden_activations(self) -> list[Activation]:
        return [layer.activation for layer in self.layers[:-1]]

    def to_dict(self) -> dict:
        out = []
        for layer in self.layers:
            entry = {
                "weights": layer.weights.tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation.kind,
            }
            if layer.activation.kind == "brelu":
                entry["cap"] = layer.activation.cap
            out.append(entry)
        return {"input_dim": self.input_dim, "num_classes": self.num_classes, "layers": out}

    @classmethod
    def from_dict(cls, data: dict) -> "Network":
        if not isinstance(data, dict):
            raise ModelFormatError("model must be a JSON object")
        for key in ("input_dim", "num_classes", "layers"):
            if key not in data:
                raise ModelFormatError(f"missing field {key!r}")
        layers = []
        for i, entry in enumerate(data["layers"]):
            try:
                act = Activation(entry.get("activation", "identity"), float(entry.get("cap", 1.0)))
                layers.append(DenseLayer(entry["weights"], entry["bias"], act))
            except KeyError as exc:
                raise ModelFormatError(f"layers[{i}]: missing field {exc.args[0]!r}") from None
            except (ValueError, TypeError) as exc:
                raise ModelFormatError(f"layers[{i}]: {exc}") from None
        try:
            net = cls(tuple(layers))
        except ValueError as exc:
            raise ModelFormatError(str(exc)) from None
        if net.input_dim != data["input_dim"]:
            raise ModelFormatError(f"input_dim is {data['input_dim']} but first layer takes {net.input_dim}")
        if net.num_classes != data["num_classes"]:
            raise ModelFormatError(f"num_classes is {data['num_classes']} but last layer emits {net.num_classes}")
        return net

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    @classmethod
    def load(cls, path: str | Path) -> "Network":
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(data)


@dataclass(frozen=True)
class MarginEval:
    value: float
    gradient: np.ndarray
    class_c: int
    class_j: int


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ShapeError(f"expected input of length {net.input_dim}, got shape {x.shape}")
    return x


def _check_classes(net: Network, c: int, j: int) -> None:
    k = net.num_classes
    if not (0 <= c < k and 0 <= j < k):
        raise InvalidTargetError(f"classes ({c}, {j}) out of range for K={k}")
    if c == j:
        raise InvalidTargetError(f"margin needs two distinct classes, got c == j == {c}")


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Logits for one input (shape ``(d,)``) or a batch (shape ``(n, d)``)."""
    a = _check_input(net, x)
    for layer in net.layers:
        a = layer.activation(a @ layer.weights.T + layer.bias)
    return a


def predict(net: Network, x: np.ndarray) -> int | np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return _argmax(forward(net, x))


def _argmax(logits: np.ndarray):
    out = np.argmax(logits, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def _forward_cached(net: Network, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    pre = []
    a = x
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        pre.append(z)
        a = layer.activation(z)
    return a, pre


def _margin_backward(net: Network, pre: list[np.ndarray], shape: tuple, c: int, j: int) -> np.ndarray:
    seed = np.zeros(net.num_classes)
    seed[c] = 1.0
    seed[j] = -1.0
    # the output layer is linear, so its backward pass is one vector for every row
    grad = seed @ net.layers[-1].weights
    for layer, z in zip(reversed(net.layers[:-1]), reversed(pre[:-1])):
        if layer.activation.kind != "identity":
            grad = grad * layer.activation.derivative(z)
        grad = grad @ layer.weights
    if grad.ndim < len(shape):
        grad = np.broadcast_to(grad, shape).copy()
    return grad


def _margin_batch(net: Network, x: np.ndarray, c: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    logits, pre = _forward_cached(net, x)
    return logits[..., c] - logits[..., j], _margin_backward(net, pre, x.shape, c, j)


def margin_and_grad(net: Network, x: np.ndarray, c: int, j: int) -> MarginEval:
    """Margin ``f_c(x) - f_j(x)`` and its exact gradient with respect to ``x``."""
    x = _check_input(net, x)
    if x.ndim != 1:
        raise ShapeError("margin_and_grad takes a single input vector; use margin_grads for batches")
    _check_classes(net, c, j)
    value, grad = _margin_batch(net, x, c, j)
    return MarginEval(float(value), np.array(grad), c, j)


def margin_grads(net: Network, xs: np.ndarray, c: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched margins and gradients: returns ``(values (n,), grads (n, d))``."""
    xs = _check_input(net, xs)
    _check_classes(net, c, j)
    return _margin_batch(net, np.atleast_2d(xs), c, j)


def margin(net: Network, x: np.ndarray, c: int, j: int):
    logits = forward(net, x)
    return logits[..., c] - logits[..., j]


def finite_diff_grad(net: Network, x: np.ndarray, c: int, j: int, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the margin, one coordinate at a time."""
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    x = _check_input(net, x)
    _check_classes(net, c, j)
    d = x.shape[0]
    steps = np.eye(d) * h
    plus = margin(net, x + steps, c, j)
    minus = margin(net, x - steps, c, j)
    return (plus - minus) / (2 * h)


def kink_distance(net: Network, x: np.ndarray) -> float:
    """Smallest distance of any pre-activation from a kink of its activation."""
    best = np.inf
    a = _check_input(net, x)
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        for k in layer.activation.kinks():
            best = min(best, float(np.min(np.abs(z - k))))
        a = layer.activation(z)
    return best


# --- training -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 50
    batch: int = 32
    seed: int = 0
    weight_decay: float = 0.0


def init_network(sizes: Sequence[int], activations: Sequence[str | Activation], rng: np.random.Generator) -> Network:
    """He-initialised network; ``activations`` covers the hidden layers only."""
    if len(activations) != len(sizes) - 2:
        raise ValueError("need one activation per hidden layer")
    acts = [a if isinstance(a, Activation) else Activation(a) for a in activations] + [Activation("identity")]
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], acts):
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return Network(tuple(layers))


def accuracy(net: Network, features: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(net, features) == labels))


def train_sgd(
    features: np.ndarray,
    labels: np.ndarray,
    hidden: Sequence[int],
    activations: Sequence[str | Activation],
    config: TrainConfig = TrainConfig(),
    num_classes: int | None = None,
) -> Network:
    """Minibatch SGD on softmax cross-entropy.

    Softmax appears only in the training loss; the returned network emits raw
    logits. Deterministic given ``config.seed``.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training set must be a non-empty (n, d) matrix")
    if y.shape != (x.shape[0],):
        raise ShapeError("labels must be a vector with one entry per row")
    k = int(num_classes if num_classes is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")

    rng = np.random.default_rng(config.seed)
    sizes = [x.shape[1], *hidden, k]
    net = init_network(sizes, activations, rng)
    weights = [np.array(l.weights) for l in net.layers]
    biases = [np.array(l.bias) for l in net.layers]
    acts = [l.activation for l in net.layers]
    onehot = np.eye(k)[y]
    n = x.shape[0]

    # overflow shows up as a non-finite loss, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, config.batch):
                idx = order[start:start + config.batch]
                a = x[idx]
                inputs, pre = [], []
                for w, b, act in zip(weights, biases, acts):
                    inputs.append(a)
                    z = a @ w.T + b
                    pre.append(z)
                    a = act(z)
                shifted = a - a.max(axis=1, keepdims=True)
                logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
                total += -np.sum(logp * onehot[idx])
                g = (np.exp(logp) - onehot[idx]) / len(idx)
                for li in range(len(weights) - 1, -1, -1):
                    g = g * acts[li].derivative(pre[li])
                    gw = g.T @ inputs[li] + config.weight_decay * weights[li]
                    gb = g.sum(axis=0)
                    g = g @ weights[li]
                    weights[li] -= config.lr * gw
                    biases[li] -= config.lr * gb
            if not np.isfinite(total):
                raise DivergenceError(epoch, total)

    return Network(tuple(DenseLayer(w, b, a) for w, b, a in zip(weights, biases, acts)))
