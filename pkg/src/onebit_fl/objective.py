"""Task losses, the smoothed sign regularizer, and the regularized client objective.

Models are flat float64 parameter vectors. Flattening is layer-major with
weights before biases: for layer dims (d0, d1, ..., dL) the vector is
``[W1.ravel(), b1, W2.ravel(), b2, ...]`` where ``W_l`` has shape
(d_{l-1}, d_l) and ravels row-major. The hidden activation applies to every
layer except the last; the final layer is linear and feeds either a squared
loss (linear regression) or a softmax cross-entropy head.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .sketch import SketchOperator, adjoint, forward

LOG2 = math.log(2.0)
TANH_SATURATION = 20.0  # tanh(20) already rounds to 1.0 in float64

MODEL_KINDS = ("linear-regression", "logistic-regression", "mlp")
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; ``n`` is the flat parameter count."""

    kind: str
    layer_dims: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ConfigError(f"layer_dims must be >= 2 positive integers, got {self.layer_dims}")
        if self.kind == "linear-regression" and (len(dims) != 2 or dims[-1] != 1):
            raise ConfigError("linear-regression expects layer_dims (features, 1)")
        if self.kind == "logistic-regression" and (len(dims) != 2 or dims[-1] < 2):
            raise ConfigError("logistic-regression expects layer_dims (features, classes>=2)")
        if self.kind == "mlp" and self.activation not in ACTIVATIONS:
            raise ConfigError(f"mlp activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def n(self) -> int:
        dims = self.layer_dims
        return sum((dims[i] + 1) * dims[i + 1] for i in range(len(dims) - 1))

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear-regression"

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Zeros for the convex kinds; Xavier-scaled normal weights for the MLP."""
        if self.kind != "mlp":
            return np.zeros(self.n)
        parts = []
        dims = self.layer_dims
        for din, dout in zip(dims[:-1], dims[1:]):
            std = math.sqrt(2.0 / (din + dout))
            parts.append(std * rng.standard_normal(din * dout))
            parts.append(np.zeros(dout))
        return np.concatenate(parts)

    def unflatten(self, w: np.ndarray):
        """Views of (W, b) per layer in flattening order."""
        layers = []
        offset = 0
        dims = self.layer_dims
        for din, dout in zip(dims[:-1], dims[1:]):
            W = w[offset: offset + din * dout].reshape(din, dout)
            offset += din * dout
            b = w[offset: offset + dout]
            offset += dout
            layers.append((W, b))
        return layers


@dataclass(frozen=True)
class HyperParams:
    """Optimization hyperparameters shared by every client."""

    eta: float
    lam: float = 5e-4
    mu: float = 1e-5
    gamma: float = 1e4
    local_steps: int = 5
    rounds: int = 100
    participants: int = 10
    batch_size: int = 32

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.lam < 0 or self.mu < 0:
            raise ConfigError("lambda and mu must be non-negative")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.local_steps < 0 or self.rounds < 0:
            raise ConfigError("local_steps and rounds must be >= 0")
        if self.participants < 1 or self.batch_size < 1:
            raise ConfigError("participants and batch_size must be >= 1")
        if self.mu > 0 and self.eta >= 1.0 / (3.0 * self.mu):
            warnings.warn(
                f"eta={self.eta} is not below 1/(3*mu)={1.0 / (3.0 * self.mu)}; "
                "the bounded-weight-norm guarantee does not apply",
                RuntimeWarning,
                stacklevel=2,
            )


def _activate(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _forward_pass(spec: ModelSpec, w: np.ndarray, x: np.ndarray):
    """Per-layer activations, checking finiteness as required."""
    layers = spec.unflatten(w)
    acts = [x]
    a = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite forward pass at layer {i}")
        a = z if i == last else _activate(spec.activation, z)
        acts.append(a)
    return layers, acts


def _check_batch(spec: ModelSpec, w, batch):
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch features must be a non-empty (batch, features) array")
    if x.shape[1] != spec.layer_dims[0]:
        raise ValueError(f"feature dimension {x.shape[1]} does not match model input {spec.layer_dims[0]}")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.n,):
        raise ValueError(f"parameter vector must have shape ({spec.n},), got {w.shape}")
    if spec.is_classifier:
        y = np.asarray(y)
        if y.shape != (x.shape[0],) or np.any(y < 0) or np.any(y >= spec.layer_dims[-1]):
            raise ValueError("labels must be class indices matching the batch")
        y = y.astype(np.int64)
    else:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.shape != (x.shape[0],):
            raise ValueError("targets must match the batch size")
    return x, y, w


def _loss_head(spec: ModelSpec, out: np.ndarray, y: np.ndarray):
    """Mean loss and gradient w.r.t. the network output."""
    batch = out.shape[0]
    if spec.kind == "linear-regression":
        resid = out[:, 0] - y
        loss = 0.5 * float(np.mean(resid**2))
        dout = (resid / batch)[:, None]
        return loss, dout
    # softmax cross-entropy via log-sum-exp
    zmax = out.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(out - zmax).sum(axis=1, keepdims=True))
    logp = out - lse
    rows = np.arange(batch)
    loss = -float(np.mean(logp[rows, y]))
    dout = np.exp(logp)
    dout[rows, y] -= 1.0
    dout /= batch
    return loss, dout


def task_loss(spec: ModelSpec, w, batch) -> float:
    """Mean per-sample task loss over the batch (forward pass only)."""
    x, y, w = _check_batch(spec, w, batch)
    _, acts = _forward_pass(spec, w, x)
    loss, _ = _loss_head(spec, acts[-1], y)
    return loss


def task_loss_and_grad(spec: ModelSpec, w, batch):
    """Mean loss and mean gradient over the batch, by explicit backpropagation."""
    x, y, w = _check_batch(spec, w, batch)
    layers, acts = _forward_pass(spec, w, x)
    loss, delta = _loss_head(spec, acts[-1], y)
    parts = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        gw = acts[i].T @ delta
        gb = delta.sum(axis=0)
        parts[i] = (gw, gb)
        if i > 0:
            delta = delta @ layers[i][0].T
            hidden = acts[i]
            if spec.activation == "tanh":
                delta *= 1.0 - hidden * hidden
            else:
                delta *= hidden > 0
    grad = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in parts])
    return loss, grad


def predict(spec: ModelSpec, w, x) -> np.ndarray:
    """Class labels for the classifier kinds, raw outputs for regression."""
    x = np.asarray(x, dtype=np.float64)
    _, acts = _forward_pass(spec, np.asarray(w, dtype=np.float64), x)
    out = acts[-1]
    return out.argmax(axis=1) if spec.is_classifier else out[:, 0]


def logcosh_surrogate(z, gamma: float) -> float:
    """Smooth l1 surrogate ``(1/g) * sum_i log cosh(g * z_i)``.

    Evaluated through ``log cosh(x) = |x| + log1p(exp(-2|x|)) - log 2`` so
    large gamma never overflows. Approaches the l1 norm from below, within
    ``len(z) * log(2) / gamma``.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    a = np.abs(np.asarray(z, dtype=np.float64) * gamma)
    return float(np.sum(a + np.log1p(np.exp(-2.0 * a)) - LOG2) / gamma)


def saturated_tanh(x) -> np.ndarray:
    """tanh snapped to exactly +-1 for |x| > 20.

    tanh(20) rounds to 1.0 in float64 anyway; skipping the exp calls in the
    saturated region keeps gamma = 1e4 runs cheap with zero value change.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x)
    small = np.abs(x) <= TANH_SATURATION
    out[small] = np.tanh(x[small])
    return out


def regularizer_grad(op: SketchOperator, w, v, gamma: float) -> np.ndarray:
    """Gradient of the sign-alignment penalty: adjoint(tanh(gamma * Phi w) - v)."""
    z = forward(op, w)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != z.shape:
        raise ValueError(f"consensus dimension {v.shape} does not match sketch dimension {z.shape}")
    return adjoint(op, saturated_tanh(gamma * z) - v)


def alignment_penalty(op: SketchOperator, w, v, gamma: float) -> float:
    """Smoothed one-sided penalty ``h_gamma(Phi w) - <v, Phi w>`` (unweighted)."""
    z = forward(op, w)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != z.shape:
        raise ValueError(f"consensus dimension {v.shape} does not match sketch dimension {z.shape}")
    return logcosh_surrogate(z, gamma) - float(v @ z)


def client_objective(spec: ModelSpec, op: SketchOperator, w, v, hp: HyperParams, batch) -> float:
    """Regularized objective: task loss + lam * alignment penalty + mu/2 ||w||^2."""
    w = np.asarray(w, dtype=np.float64)
    value = task_loss(spec, w, batch)
    if hp.lam != 0.0:
        value += hp.lam * alignment_penalty(op, w, v, hp.gamma)
    if hp.mu != 0.0:
        value += 0.5 * hp.mu * float(w @ w)
    return value


def client_grad(spec: ModelSpec, op: SketchOperator, w, v, hp: HyperParams, batch) -> np.ndarray:
    """Gradient of the regularized objective on one mini-batch."""
    w = np.asarray(w, dtype=np.float64)
    _, grad = task_loss_and_grad(spec, w, batch)
    if hp.lam != 0.0:
        grad += hp.lam * regularizer_grad(op, w, v, hp.gamma)
    if hp.mu != 0.0:
        grad += hp.mu * w
    return grad
