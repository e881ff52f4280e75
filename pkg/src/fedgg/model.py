"""Multilayer perceptron with hand-written backprop and momentum SGD.

Flattened parameter layout, layer by layer: the weight matrix of shape
``(in_dim, out_dim)`` in row-major order, then the bias vector of length
``out_dim``. Hidden layers use ReLU; the output layer produces raw logits that
feed a softmax cross-entropy averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedgg.params import DimensionError, NonFiniteError, as_vector


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer dims must be positive, got {dims}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    def slices(self) -> list[tuple[slice, slice, tuple[int, int]]]:
        """(weight slice, bias slice, weight shape) for every layer."""
        out = []
        pos = 0
        for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = slice(pos, pos + i * o)
            pos += i * o
            b = slice(pos, pos + o)
            pos += o
            out.append((w, b, (i, o)))
        return out


@dataclass(frozen=True)
class ModelState:
    spec: MlpSpec
    params: np.ndarray

    def __post_init__(self):
        p = as_vector(self.params)
        if p.size != self.spec.num_params:
            raise DimensionError(
                f"spec {self.spec.layer_dims} needs {self.spec.num_params} params, got {p.size}"
            )
        object.__setattr__(self, "params", p)


def unflatten(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(params[ws].reshape(shape), params[bs]) for ws, bs, shape in spec.slices()]


def flatten(layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for w, b in layers:
        parts.append(np.ravel(w))
        parts.append(np.ravel(b))
    return np.concatenate(parts).astype(np.float64)


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ModelState:
    """He-normal weights, zero biases."""
    layers = []
    for i, o in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        w = rng.standard_normal((i, o)) * math.sqrt(2.0 / i)
        layers.append((w, np.zeros(o)))
    return ModelState(spec, flatten(layers))


def logits(spec: MlpSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    h = np.asarray(features, dtype=np.float64)
    layers = unflatten(spec, params)
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def _check_batch(spec: MlpSpec, features, labels) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"features must be a non-empty n x d matrix, got shape {x.shape}")
    if x.shape[1] != spec.input_dim:
        raise DimensionError(f"features have {x.shape[1]} columns, spec expects {spec.input_dim}")
    if y.size != x.shape[0]:
        raise DimensionError("features and labels disagree on sample count")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    return x, y


def loss_and_grad_sup(state: ModelState, features, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy of a batch and its exact gradient."""
    spec = state.spec
    x, y = _check_batch(spec, features, labels)
    n = x.shape[0]
    layers = unflatten(spec, state.params)

    acts = [x]
    h = x
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    z = acts[-1]
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite logits")

    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    per_sample = log_norm - shifted[np.arange(n), y]
    loss = math.fsum(per_sample.tolist()) / n

    probs = np.exp(shifted - log_norm[:, None])
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        a_in = acts[k]
        grads.append((a_in.T @ delta, delta.sum(axis=0)))
        if k > 0:
            delta = (delta @ w.T) * (acts[k] > 0.0)
    grads.reverse()
    grad = flatten(grads)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    return loss, grad


def sgd_momentum_step(params, grad, velocity, lr: float, momentum: float):
    """Heavy-ball step: ``v' = momentum*v + grad``, ``w' = w - lr*v'``."""
    # lr == 0 is allowed: it freezes the model, which the tests rely on.
    if not lr >= 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    if not (params.shape == grad.shape == velocity.shape):
        raise DimensionError("params, grad and velocity must have equal length")
    new_v = momentum * velocity + grad
    new_w = params - lr * new_v
    if not np.all(np.isfinite(new_w)):
        raise NonFiniteError("SGD step diverged")
    return new_w, new_v


def predict(state: ModelState, features) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties.
    return np.argmax(logits(state.spec, state.params, features), axis=1)


def evaluate(state: ModelState, dataset) -> float:
    if len(dataset.labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(state, dataset.features)
    return float(np.count_nonzero(pred == dataset.labels)) / len(dataset.labels)
