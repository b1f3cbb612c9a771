"""Reverse-mode autodiff on dense numpy arrays and the small models built on it.

Parameters of every model live in one flat float64 vector.  For an MLP the
layout is, layer by layer, the weight matrix (fan_in x fan_out, row-major)
followed by the bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, SpecificationError

DTYPE = np.float64


def fixed_mean(values) -> float:
    """Mean with a correctly rounded sum, so the result is independent of order."""
    values = np.asarray(values, dtype=DTYPE)
    if values.size == 0:
        raise SpecificationError("mean of an empty set")
    return math.fsum(values.tolist()) / values.size


# ---------------------------------------------------------------------------
# Autodiff tape
# ---------------------------------------------------------------------------


class Tensor:
    """Node of a dynamically built computation graph."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "name")

    def __init__(self, data, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + g

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def backward(self, seed=None):
        """Propagate ``seed`` (defaults to ones) back through the graph."""
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=DTYPE)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Tensor(a.data @ b.data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor(np.maximum(x.data, 0.0), (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return Tensor(y, (x,), backward)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample cross-entropy; returns a vector with one loss per row."""
    logp = log_softmax(logits.data)
    rows = np.arange(len(labels))
    losses = -logp[rows, labels]

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        logits._accumulate(grad * g[:, None])

    return Tensor(losses, (logits,), backward)


def square_norm(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(2.0 * g * x.data)

    return Tensor(np.dot(x.data, x.data), (x,), backward)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

ACTIVATIONS = {"relu": relu, "tanh": tanh}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and init seed.

    ``kind="mlp"`` is a fully connected softmax classifier with
    ``layers = [feature_dim, hidden..., classes]``.  ``kind="quadratic"`` is the
    oracle pseudo-model whose every sample loss is ``sum(theta**2)``; its
    ``layers`` holds a single entry, the parameter count.
    """

    layers: tuple
    activation: str = "relu"
    seed: int = 0
    kind: str = "mlp"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(n) for n in self.layers))
        if self.kind not in ("mlp", "quadratic"):
            raise SpecificationError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise SpecificationError(f"unknown activation {self.activation!r}")
        if any(n <= 0 for n in self.layers):
            raise SpecificationError(f"layer sizes must be positive, got {list(self.layers)}")
        if self.kind == "mlp" and len(self.layers) < 2:
            raise SpecificationError("an MLP needs at least input and output sizes")
        if self.kind == "quadratic" and len(self.layers) != 1:
            raise SpecificationError("quadratic head takes exactly one size")

    def to_dict(self):
        return {"kind": self.kind, "layers": list(self.layers),
                "activation": self.activation, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(layers=tuple(d["layers"]), activation=d.get("activation", "relu"),
                   seed=int(d.get("seed", 0)), kind=d.get("kind", "mlp"))


@dataclass(frozen=True)
class SampleBatch:
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.indices)


def param_count(spec: ModelSpec) -> int:
    if spec.kind == "quadratic":
        return spec.layers[0]
    return sum(a * b + b for a, b in zip(spec.layers[:-1], spec.layers[1:]))


def init_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_model(spec: ModelSpec) -> np.ndarray:
    """Glorot-uniform weights and zero biases, deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "quadratic":
        return rng.uniform(-1.0, 1.0, size=spec.layers[0]) / math.sqrt(spec.layers[0])
    parts = []
    for fan_in, fan_out in zip(spec.layers[:-1], spec.layers[1:]):
        bound = init_bound(fan_in, fan_out)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts).astype(DTYPE)


@dataclass
class _Pass:
    """Recorded forward pass: per-layer inputs, pre-activations and the loss node."""

    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    params: list = field(default_factory=list)
    losses: Tensor = None


class Model:
    """Binds a :class:`ModelSpec` to loss/gradient evaluation on flat vectors."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.size = param_count(spec)
        self._slices = []
        if spec.kind == "mlp":
            offset = 0
            for fan_in, fan_out in zip(spec.layers[:-1], spec.layers[1:]):
                w = slice(offset, offset + fan_in * fan_out)
                offset += fan_in * fan_out
                b = slice(offset, offset + fan_out)
                offset += fan_out
                self._slices.append((w, b, fan_in, fan_out))

    def __repr__(self):
        return f"Model({self.spec!r})"

    def check_params(self, params) -> np.ndarray:
        params = np.asarray(params, dtype=DTYPE)
        if params.ndim != 1 or params.size != self.size:
            raise SpecificationError(
                f"parameter vector has length {params.size}, model expects {self.size}")
        return params

    def _check_batch(self, batch: SampleBatch):
        if self.spec.kind == "mlp":
            if batch.features.ndim != 2 or batch.features.shape[1] != self.spec.layers[0]:
                raise SpecificationError(
                    f"feature dim {batch.features.shape[-1]} != input size {self.spec.layers[0]}")
            labels = np.asarray(batch.labels)
            if labels.size and (labels.min() < 0 or labels.max() >= self.spec.layers[-1]):
                raise SpecificationError("label outside [0, class count)")

    def _forward(self, params, batch: SampleBatch, check: bool) -> _Pass:
        params = self.check_params(params)
        self._check_batch(batch)
        rec = _Pass()
        if self.spec.kind == "quadratic":
            theta = Tensor(params)
            rec.params.append(theta)
            sq = square_norm(theta)
            n = len(batch)

            def backward(g):
                theta._accumulate(2.0 * g.sum() * params)

            rec.losses = Tensor(np.full(n, sq.data), (theta,), backward)
            return rec
        act = ACTIVATIONS[self.spec.activation]
        x = Tensor(batch.features)
        last = len(self._slices) - 1
        for i, (ws, bs, fan_in, fan_out) in enumerate(self._slices):
            w = Tensor(params[ws].reshape(fan_in, fan_out))
            b = Tensor(params[bs])
            z = x @ w + b
            if check and not np.all(np.isfinite(z.data)):
                raise NumericError(f"non-finite pre-activation in layer {i}", layer=i)
            rec.inputs.append(x)
            rec.preacts.append(z)
            rec.params.append((w, b))
            x = z if i == last else act(z)
        rec.losses = softmax_cross_entropy(x, np.asarray(batch.labels))
        if check and not np.all(np.isfinite(rec.losses.data)):
            raise NumericError(f"non-finite loss after layer {last}", layer=last)
        return rec

    def _flat_grad(self, rec: _Pass) -> np.ndarray:
        if self.spec.kind == "quadratic":
            return rec.params[0].grad.copy()
        parts = []
        for w, b in rec.params:
            parts.append(w.grad.ravel())
            parts.append(b.grad)
        return np.concatenate(parts)

    def per_sample_losses(self, params, batch: SampleBatch, check: bool = True) -> np.ndarray:
        """One cross-entropy loss per sample of ``batch``."""
        return self._forward(params, batch, check).losses.data.copy()

    def loss(self, params, batch: SampleBatch) -> float:
        return fixed_mean(self.per_sample_losses(params, batch))

    def loss_and_grad(self, params, batch: SampleBatch):
        """Mean sample loss over ``batch`` and its gradient."""
        rec = self._forward(params, batch, check=True)
        n = len(batch)
        rec.losses.backward(np.full(n, 1.0 / n))
        grad = self._flat_grad(rec)
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient", layer=len(self._slices) - 1)
        return fixed_mean(rec.losses.data), grad

    def per_sample_dderiv(self, params, direction, batch: SampleBatch) -> np.ndarray:
        """Slope of every sample loss along ``direction`` at ``params``.

        Uses the per-sample backward signal at each pre-activation: the
        gradient of sample t w.r.t. (W, b) is (a_t delta_t^T, delta_t), so its
        dot product with (dW, db) is a_t^T dW delta_t + delta_t . db.
        """
        direction = self.check_params(direction)
        rec = self._forward(params, batch, check=True)
        n = len(batch)
        if self.spec.kind == "quadratic":
            return np.full(n, 2.0 * np.dot(np.asarray(params, dtype=DTYPE), direction))
        rec.losses.backward(np.ones(n))
        out = np.zeros(n)
        for (ws, bs, fan_in, fan_out), x, z in zip(self._slices, rec.inputs, rec.preacts):
            d_w = direction[ws].reshape(fan_in, fan_out)
            d_b = direction[bs]
            delta = z.grad
            out += np.einsum("ij,ij->i", x.data @ d_w, delta) + delta @ d_b
        return out

    def accuracy(self, params, batch: SampleBatch) -> float:
        if self.spec.kind == "quadratic":
            return float("nan")
        logits = self._forward(params, batch, check=False).losses.parents[0].data
        return float(np.mean(np.argmax(logits, axis=1) == np.asarray(batch.labels)))


def build_model(spec: ModelSpec) -> Model:
    return Model(spec)


def axpy_point(origin, s: float, direction) -> np.ndarray:
    """Point ``origin + s * direction`` on a line through parameter space."""
    origin = np.asarray(origin, dtype=DTYPE)
    direction = np.asarray(direction, dtype=DTYPE)
    if origin.shape != direction.shape:
        raise SpecificationError(
            f"origin length {origin.size} != direction length {direction.size}")
    if s == 0:
        return origin.copy()
    return origin + s * direction


def directional_derivative(model: Model, params, direction, batch: SampleBatch,
                           tol: float = 1e-9) -> float:
    direction = np.asarray(direction, dtype=DTYPE)
    norm = np.linalg.norm(direction)
    if abs(norm - 1.0) > tol:
        raise SpecificationError(f"direction must have unit norm, got {norm!r}")
    _, grad = model.loss_and_grad(params, batch)
    return float(np.dot(grad, direction))
