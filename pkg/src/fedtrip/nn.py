"""Dense numerics: flat parameter vectors, a ReLU MLP with hand-written
backprop, cross-entropy, and SGD with heavy-ball momentum.

Everything is float64 and pure: functions return new values and never write
into their arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod, sqrt

import numpy as np

from .errors import ConfigError, LayoutError

Layout = tuple[tuple[str, tuple[int, ...]], ...]


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ParamVector:
    """A flat float64 vector with an ordered ``(name, shape)`` segment layout.

    The backing array is made read-only so that a vector handed to a client
    (or stored as a client's history) can never be changed behind its back.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        layout = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in self.layout)
        if values.size != sum(prod(shape) for _, shape in layout):
            raise LayoutError(
                f"{values.size} values do not fill layout of size "
                f"{sum(prod(s) for _, s in layout)}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("ParamVector entries must be finite")
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "layout", layout)

    @classmethod
    def flat(cls, values, name: str = "w") -> ParamVector:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        return cls(values, ((name, (values.size,)),))

    @classmethod
    def zeros(cls, layout: Layout) -> ParamVector:
        return cls(np.zeros(sum(prod(s) for _, s in layout)), layout)

    def __len__(self) -> int:
        return self.values.size

    def like(self, values: np.ndarray) -> ParamVector:
        """New vector with the same layout and the given values."""
        return ParamVector(values, self.layout)

    def segments(self) -> dict[str, np.ndarray]:
        """Read-only views of each segment, reshaped."""
        out = {}
        start = 0
        for name, shape in self.layout:
            size = prod(shape)
            out[name] = self.values[start : start + size].reshape(shape)
            start += size
        return out

    def __add__(self, other: ParamVector) -> ParamVector:
        return add(self, other)

    def __sub__(self, other: ParamVector) -> ParamVector:
        return sub(self, other)

    def __mul__(self, c: float) -> ParamVector:
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self) -> ParamVector:
        return self.like(-self.values)


def check_layout(*vectors: ParamVector) -> None:
    first = vectors[0].layout
    for v in vectors[1:]:
        if v.layout != first:
            raise LayoutError(f"layout mismatch: {first} vs {v.layout}")


def add(x: ParamVector, y: ParamVector) -> ParamVector:
    check_layout(x, y)
    return x.like(x.values + y.values)


def sub(x: ParamVector, y: ParamVector) -> ParamVector:
    check_layout(x, y)
    return x.like(x.values - y.values)


def scale(x: ParamVector, c: float) -> ParamVector:
    return x.like(float(c) * x.values)


def dot(x: ParamVector, y: ParamVector) -> float:
    check_layout(x, y)
    return float(np.dot(x.values, y.values))


def l2_norm_sq(x: ParamVector) -> float:
    return dot(x, x)


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network ``input -> hidden... -> classes``.

    ReLU follows every hidden layer; the output layer is linear (logits).
    The default paper model is ``MlpSpec(784, (100,), 10)``.
    """

    input_dim: int
    hidden_dims: tuple[int, ...] = (100,)
    num_classes: int = 10
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(d <= 0 for d in dims):
            raise ConfigError(f"all layer sizes must be positive, got {dims}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    @property
    def layout(self) -> Layout:
        segs = []
        for i, (fan_in, fan_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            segs.append((f"W{i}", (fan_in, fan_out)))
            segs.append((f"b{i}", (fan_out,)))
        return tuple(segs)

    @property
    def param_count(self) -> int:
        return sum(prod(shape) for _, shape in self.layout)

    @property
    def macs_per_sample(self) -> int:
        """Multiply-accumulates of one forward pass."""
        return sum(a * b for a, b in zip(self.dims[:-1], self.dims[1:]))


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Weights uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, biases zero."""
    chunks = []
    for name, shape in spec.layout:
        if name.startswith("W"):
            bound = 1.0 / sqrt(shape[0])
            chunks.append(rng.uniform(-bound, bound, size=shape).reshape(-1))
        else:
            chunks.append(np.zeros(prod(shape)))
    return ParamVector(np.concatenate(chunks), spec.layout)


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise LayoutError(f"features {x.shape} and labels {y.shape} do not match")
        if x.shape[0] == 0:
            raise ValueError("dataset must be nonempty")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise ValueError("labels must be integers")
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", _freeze(x))
        object.__setattr__(self, "labels", _freeze(y))

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)


def _check_spec(spec: MlpSpec, params: ParamVector, x: np.ndarray) -> None:
    if params.layout != spec.layout:
        raise LayoutError("parameter layout does not match the network spec")
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise LayoutError(f"batch of shape {x.shape} does not fit input_dim={spec.input_dim}")


def _layers(spec: MlpSpec, params: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
    segs = params.segments()
    return [(segs[f"W{i}"], segs[f"b{i}"]) for i in range(len(spec.dims) - 1)]


def forward(spec: MlpSpec, params: ParamVector, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    _check_spec(spec, params, x)
    layers = _layers(spec, params)
    for W, b in layers[:-1]:
        x = np.maximum(x @ W + b, 0.0)
    W, b = layers[-1]
    return x @ W + b


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(
    spec: MlpSpec, params: ParamVector, features: np.ndarray, labels: np.ndarray
) -> tuple[float, ParamVector]:
    """Mean cross-entropy over the batch and its exact gradient."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise ValueError("loss_and_grad needs a nonempty batch")
    _check_spec(spec, params, x)
    if x.shape[0] != y.size:
        raise LayoutError("features and labels have different lengths")

    layers = _layers(spec, params)
    acts = [x]
    for W, b in layers[:-1]:
        acts.append(np.maximum(acts[-1] @ W + b, 0.0))
    W, b = layers[-1]
    logp = log_softmax(acts[-1] @ W + b)
    n = y.size
    rows = np.arange(n)
    loss = float(-logp[rows, y].mean())

    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta /= n
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append((acts[i].T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ W.T) * (acts[i] > 0.0)
    flat = []
    for gW, gb in reversed(grads):
        flat.append(gW.reshape(-1))
        flat.append(gb)
    return loss, ParamVector(np.concatenate(flat), params.layout)


def accuracy(spec: MlpSpec, params: ParamVector, data: Dataset) -> float:
    pred = forward(spec, params, data.features).argmax(axis=1)
    return float(np.mean(pred == data.labels))


@dataclass(frozen=True)
class SgdmState:
    velocity: ParamVector
    learning_rate: float
    momentum: float = field(default=0.9)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")

    @classmethod
    def fresh(cls, params: ParamVector, learning_rate: float, momentum: float) -> SgdmState:
        return cls(ParamVector.zeros(params.layout), learning_rate, momentum)


def sgdm_step(
    params: ParamVector, grad: ParamVector, state: SgdmState
) -> tuple[ParamVector, SgdmState]:
    """Heavy-ball update: ``v <- beta*v + g``; ``w <- w - lr*v``."""
    check_layout(params, grad, state.velocity)
    v = state.momentum * state.velocity.values + grad.values
    new_params = params.like(params.values - state.learning_rate * v)
    return new_params, SgdmState(params.like(v), state.learning_rate, state.momentum)
