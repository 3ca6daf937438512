"""Small classifiers with hand-written cross-entropy gradients."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np

from fedmerge.params import LayerLayout, ParamVector, SeededRng

if TYPE_CHECKING:
    from fedmerge.data import ClientDataset


class ModelKind(str, Enum):
    LOGISTIC = "logistic"
    MLP = "mlp"


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind = ModelKind.LOGISTIC
    input_dim: int = 10
    num_classes: int = 4
    hidden_dim: int = 32
    activation: Activation = Activation.RELU
    # number of trailing affine layers forming the classification head
    head_layers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("input_dim must be >= 1 and num_classes >= 2")
        if self.kind is ModelKind.MLP and self.hidden_dim < 1:
            raise ValueError("mlp needs hidden_dim >= 1")
        n_affine = 1 if self.kind is ModelKind.LOGISTIC else 2
        if not 1 <= self.head_layers <= n_affine:
            raise ValueError(f"head_layers must be in [1, {n_affine}] for {self.kind.value}")

    @cached_property
    def layout(self) -> LayerLayout:
        if self.kind is ModelKind.LOGISTIC:
            shapes = [
                ("head.weight", (self.input_dim, self.num_classes)),
                ("head.bias", (self.num_classes,)),
            ]
        else:
            shapes = [
                ("hidden.weight", (self.input_dim, self.hidden_dim)),
                ("hidden.bias", (self.hidden_dim,)),
                ("head.weight", (self.hidden_dim, self.num_classes)),
                ("head.bias", (self.num_classes,)),
            ]
        return LayerLayout.from_shapes(shapes, head_layers=2 * self.head_layers)

    @property
    def num_params(self) -> int:
        return self.layout.size


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"bad batch shapes {x.shape} / {y.shape}")
        if x.shape[0] < 1:
            raise ValueError("batch must hold at least one row")
        if not np.all(np.isfinite(x)):
            raise ValueError("batch features must be finite")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self) -> int:
        return self.labels.shape[0]


def _check_labels(spec: ModelSpec, labels: np.ndarray) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        bad = int(np.flatnonzero((labels < 0) | (labels >= spec.num_classes))[0])
        raise ValueError(f"label {int(labels[bad])} at row {bad} outside [0, {spec.num_classes})")


def _unpack(spec: ModelSpec, theta: np.ndarray) -> list[np.ndarray]:
    return [theta[l.offset : l.offset + l.length].reshape(l.shape) for l in spec.layout.layers]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _hidden(spec: ModelSpec, x: np.ndarray, w1: np.ndarray, b1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pre = x @ w1 + b1
    if spec.activation is Activation.RELU:
        return pre, np.maximum(pre, 0.0)
    return pre, np.tanh(pre)


def logits_array(spec: ModelSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    parts = _unpack(spec, theta)
    if spec.kind is ModelKind.LOGISTIC:
        w, b = parts
        return x @ w + b
    w1, b1, w2, b2 = parts
    _, h = _hidden(spec, x, w1, b1)
    return h @ w2 + b2


def loss_grad_array(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient on raw arrays (no validation)."""
    parts = _unpack(spec, theta)
    n = x.shape[0]
    if spec.kind is ModelKind.LOGISTIC:
        w, b = parts
        logits = x @ w + b
    else:
        w1, b1, w2, b2 = parts
        pre, h = _hidden(spec, x, w1, b1)
        logits = h @ w2 + b2
    logp = _log_softmax(logits)
    rows = np.arange(n)
    loss = -float(logp[rows, y].mean())
    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dlogits /= n
    if spec.kind is ModelKind.LOGISTIC:
        grads = [x.T @ dlogits, dlogits.sum(axis=0)]
    else:
        dh = dlogits @ w2.T
        if spec.activation is Activation.RELU:
            dpre = dh * (pre > 0.0)
        else:
            dpre = dh * (1.0 - h * h)
        grads = [x.T @ dpre, dpre.sum(axis=0), h.T @ dlogits, dlogits.sum(axis=0)]
    return loss, np.concatenate([g.reshape(-1) for g in grads])


def forward(spec: ModelSpec, theta: ParamVector, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy loss and the logits matrix."""
    if theta.layout != spec.layout:
        raise ValueError("theta layout does not match model spec")
    _check_labels(spec, batch.labels)
    logits = logits_array(spec, theta.values, batch.features)
    logp = _log_softmax(logits)
    loss = -float(logp[np.arange(len(batch)), batch.labels].mean())
    return loss, logits


def grad(spec: ModelSpec, theta: ParamVector, batch: Batch) -> ParamVector:
    if theta.layout != spec.layout:
        raise ValueError("theta layout does not match model spec")
    _check_labels(spec, batch.labels)
    _, g = loss_grad_array(spec, theta.values, batch.features, batch.labels)
    return ParamVector(g, spec.layout)


def evaluate(spec: ModelSpec, theta: ParamVector, batch: Batch) -> tuple[float, float]:
    """(mean loss, accuracy) of ``theta`` on ``batch``."""
    loss, logits = forward(spec, theta, batch)
    acc = float(np.mean(np.argmax(logits, axis=1) == batch.labels))
    return loss, acc


def sgd_epochs(
    spec: ModelSpec,
    theta: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    eta: float,
    epochs: int,
    batch_size: int,
    gen: np.random.Generator,
    grad_scale: float = 1.0,
) -> np.ndarray:
    """Plain minibatch SGD; each epoch is one shuffled pass, last partial batch kept."""
    n = x.shape[0]
    theta = theta.copy()
    for _ in range(epochs):
        order = gen.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, g = loss_grad_array(spec, theta, x[idx], y[idx])
            theta -= (eta * grad_scale) * g
    return theta


def local_sgd(
    spec: ModelSpec,
    theta0: ParamVector,
    data: ClientDataset,
    eta_loc: float,
    epochs: int,
    batch_size: int,
    rng: SeededRng,
) -> tuple[ParamVector, ParamVector]:
    """Run local SGD on the client's train split.

    Returns the trained vector and the update ``theta_t - theta0``.
    """
    if eta_loc <= 0:
        raise ValueError("eta_loc must be positive")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    x, y = data.split_arrays("train")
    if x.shape[0] == 0:
        raise ValueError("client has no training samples")
    _check_labels(spec, y)
    theta_t = sgd_epochs(spec, theta0.values, x, y, eta_loc, epochs, batch_size, rng.generator)
    return ParamVector(theta_t, spec.layout), ParamVector(theta_t - theta0.values, spec.layout)
