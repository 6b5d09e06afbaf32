"""Hypothesis sets: linear regression, softmax classifier and a small tanh MLP.

Parameters are flat float64 arrays. The layout is fixed by :class:`ModelSpec`:
every layer is a ``(out, in + 1)`` row-major block whose last column is the
bias (a constant-1 feature is appended to each input).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, ParameterError, ShapeError, UnsupportedOperationError

KINDS = ("linear-regression", "softmax", "mlp")
PROB_EPS = 1e-12


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int | None = None
    hidden_dims: tuple[int, ...] = field(default_factory=tuple)
    weight_bound: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ParameterError("input_dim must be positive")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind == "linear-regression":
            if self.num_classes is not None:
                raise ParameterError("linear-regression takes no num_classes")
            if self.hidden_dims:
                raise ParameterError("linear-regression takes no hidden_dims")
        else:
            if self.num_classes is None or self.num_classes < 2:
                raise ParameterError(f"{self.kind} needs num_classes >= 2")
        if self.kind == "softmax" and self.hidden_dims:
            raise ParameterError("softmax takes no hidden_dims; use kind='mlp'")
        if self.kind == "mlp" and (not self.hidden_dims or min(self.hidden_dims) < 1):
            raise ParameterError("mlp needs a nonempty list of positive hidden_dims")
        if self.weight_bound is not None and not self.weight_bound > 0:
            raise ParameterError("weight_bound must be > 0")

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear-regression"

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in + 1) for each layer, in forward order."""
        if self.kind == "linear-regression":
            return [(1, self.input_dim + 1)]
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return [(dims[i + 1], dims[i] + 1) for i in range(len(dims) - 1)]

    @property
    def num_params(self) -> int:
        return sum(o * i for o, i in self.layer_shapes)

    def unflatten(self, w: np.ndarray) -> list[np.ndarray]:
        """Views of ``w`` as per-layer weight matrices."""
        w = check_params(self, w)
        out, start = [], 0
        for o, i in self.layer_shapes:
            out.append(w[start:start + o * i].reshape(o, i))
            start += o * i
        return out

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "input_dim": self.input_dim}
        if self.num_classes is not None:
            d["num_classes"] = self.num_classes
        if self.hidden_dims:
            d["hidden_dims"] = list(self.hidden_dims)
        if self.weight_bound is not None:
            d["weight_bound"] = self.weight_bound
        return d


def check_params(spec: ModelSpec, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size != spec.num_params:
        raise ShapeError(f"parameter vector has shape {w.shape}; {spec.kind} expects ({spec.num_params},)")
    return w


def _check_features(spec: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"features have shape {x.shape}; expected (*, {spec.input_dim})")
    return x


def augment(x: np.ndarray) -> np.ndarray:
    """Append the constant-1 bias feature."""
    return np.hstack([x, np.ones((x.shape[0], 1))])


def init_params(spec: ModelSpec, rng: np.random.Generator, scale: float | None = None) -> np.ndarray:
    """Random initial parameters (Glorot-style per layer, zero bias)."""
    blocks = []
    for o, i in spec.layer_shapes:
        s = scale if scale is not None else np.sqrt(2.0 / (o + i))
        blk = rng.normal(0.0, s, size=(o, i))
        blk[:, -1] = 0.0
        blocks.append(blk.ravel())
    return np.concatenate(blocks)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(spec: ModelSpec, w: np.ndarray, x: np.ndarray):
    """Return (output, cache) for a 2-D batch. Output is scores for linear, probs otherwise."""
    layers = spec.unflatten(w)
    acts = [x]
    h = x
    for W in layers[:-1]:
        h = np.tanh(augment(h) @ W.T)
        acts.append(h)
    z = augment(h) @ layers[-1].T
    if spec.kind == "linear-regression":
        return z[:, 0], (layers, acts)
    return softmax(z), (layers, acts)


def predict(spec: ModelSpec, w, x):
    """Prediction for one feature vector or a batch of rows.

    Linear regression returns ``w . [x, 1]``; classifiers return class
    probabilities (rows sum to one).
    """
    w = check_params(spec, w)
    single = np.ndim(x) == 1
    out, _ = _forward(spec, w, _check_features(spec, x))
    return out[0] if single else out


def _labels(spec: ModelSpec, y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"labels have shape {y.shape}; expected ({n},)")
    if spec.is_classifier:
        y = y.astype(int)
        if y.min() < 0 or y.max() >= spec.num_classes:
            raise ShapeError(f"class labels outside [0, {spec.num_classes})")
    return y


def _xy(dataset):
    if isinstance(dataset, tuple):
        return dataset
    return dataset.features, dataset.labels


def loss(spec: ModelSpec, w, dataset) -> float:
    """Mean sample loss: squared error for regression, clamped cross-entropy otherwise.

    ``dataset`` is a :class:`~lcfl.data.ClientDataset` or an ``(X, y)`` pair.
    """
    x, y = _xy(dataset)
    x = _check_features(spec, x)
    if x.shape[0] == 0:
        raise EmptyInputError("loss of an empty dataset")
    y = _labels(spec, y, x.shape[0])
    out, _ = _forward(spec, check_params(spec, w), x)
    if spec.kind == "linear-regression":
        return float(np.mean((out - y) ** 2))
    p = np.clip(out[np.arange(len(y)), y], PROB_EPS, 1.0)
    return float(-np.mean(np.log(p)))


def per_sample_loss(spec: ModelSpec, w, x, y) -> np.ndarray:
    x = _check_features(spec, x)
    y = _labels(spec, y, x.shape[0])
    out, _ = _forward(spec, check_params(spec, w), x)
    if spec.kind == "linear-regression":
        return (out - y) ** 2
    return -np.log(np.clip(out[np.arange(len(y)), y], PROB_EPS, 1.0))


def gradient(spec: ModelSpec, w, batch) -> np.ndarray:
    """Gradient of the mean batch loss with respect to the flat parameters."""
    x, y = _xy(batch)
    x = _check_features(spec, x)
    n = x.shape[0]
    if n == 0:
        raise EmptyInputError("gradient of an empty batch")
    y = _labels(spec, y, n)
    w = check_params(spec, w)
    out, (layers, acts) = _forward(spec, w, x)
    if spec.kind == "linear-regression":
        delta = (2.0 / n) * (out - y)[:, None]
    else:
        delta = out.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n
    grads = [None] * len(layers)
    for li in range(len(layers) - 1, -1, -1):
        grads[li] = delta.T @ augment(acts[li])
        if li > 0:
            back = delta @ layers[li][:, :-1]
            delta = back * (1.0 - acts[li] ** 2)
    return np.concatenate([g.ravel() for g in grads])


def accuracy(spec: ModelSpec, w, dataset) -> float:
    """Fraction of samples whose argmax class (lowest index on ties) matches the label."""
    if not spec.is_classifier:
        raise UnsupportedOperationError("accuracy is undefined for linear-regression")
    x, y = _xy(dataset)
    x = _check_features(spec, x)
    if x.shape[0] == 0:
        raise EmptyInputError("accuracy of an empty dataset")
    y = _labels(spec, y, x.shape[0])
    probs, _ = _forward(spec, check_params(spec, w), x)
    return float(np.mean(np.argmax(probs, axis=1) == y))


def shift_classes(spec: ModelSpec, w, phi) -> np.ndarray:
    """Subtract the same vector ``phi`` (length input_dim + 1) from every class row.

    For a softmax model the predictions are unchanged while the parameter
    vector moves by sqrt(K) * ||phi||.
    """
    if spec.kind != "softmax":
        raise UnsupportedOperationError("class-row shift is defined for softmax models only")
    (W,) = spec.unflatten(w)
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (W.shape[1],):
        raise ShapeError(f"phi has shape {phi.shape}; expected ({W.shape[1]},)")
    return (W - phi[None, :]).ravel()


def make_spec(kind: str, input_dim: int, num_classes: int | None = None,
              hidden_dims: Sequence[int] = (), weight_bound: float | None = None) -> ModelSpec:
    return ModelSpec(kind, int(input_dim), None if num_classes is None else int(num_classes),
                     tuple(hidden_dims), weight_bound)
