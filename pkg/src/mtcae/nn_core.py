"""
Dense-layer numerical core.

Forward/backward passes for fully connected layers with ELU, softmax or
linear activations, the cross-entropy and L2 terms used by the training
objectives, an Adam optimizer and a central-difference gradient checker.

Conventions:
    - Weights are stored ``[out x in]``; a layer computes ``x @ W.T + b``.
    - Everything is float64.
    - Batch losses are means over examples, so the gradients returned by
      ``dense_backward`` are gradients of whatever the caller folded into
      ``upstream`` (callers divide by the batch size themselves).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numba import njit

ACTIVATIONS = ("elu", "softmax", "linear")
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class NumericError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


# ---------------------------------------------------------------------------
# Activations and losses
# ---------------------------------------------------------------------------


def elu(x, alpha: float = 1.0):
    """``x`` for ``x >= 0``, ``alpha * (exp(x) - 1)`` otherwise.

    Works on scalars and arrays alike.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return float(x) if x >= 0 else float(alpha * np.expm1(x))
    # branch-free: max(x, 0) + alpha * expm1(min(x, 0)), exact on both sides
    neg = np.minimum(x, 0.0)
    np.expm1(neg, out=neg)
    if alpha != 1.0:
        neg *= alpha
    out = np.maximum(x, 0.0)
    out += neg
    return out


def elu_derivative(x, alpha: float = 1.0):
    """Derivative of :func:`elu`; the right derivative (1) is used at 0."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0.0, 1.0, alpha * np.exp(np.minimum(x, 0.0)))
    return out if out.ndim else float(out)


def softmax(logits):
    """Row-wise softmax over the last axis, shifted by the row max."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(true_onehot, q) -> float:
    """``-sum(p * log q)`` with ``q`` floored at 1e-12."""
    p = np.asarray(true_onehot, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), PROB_FLOOR)
    return float(-(p * np.log(q)).sum())


def batch_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of integer ``labels`` under row distributions ``probs``."""
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def softmax_cross_entropy_grad(probs, label):
    """Gradient of ``cross_entropy(onehot(label), softmax(z))`` w.r.t. ``z``.

    ``probs`` may be a single vector with an int label, or a batch
    ``[n x k]`` with an integer array of labels (no averaging is applied).
    """
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[-1]
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= k):
        raise IndexError(f"label {label} out of range for {k} classes")
    grad = probs.copy()
    if grad.ndim == 1:
        grad[int(label)] -= 1.0
    else:
        grad[np.arange(grad.shape[0]), label] -= 1.0
    return grad


def l2_penalty(weights, beta: float) -> float:
    """``beta`` times the summed squares of all given weight matrices."""
    if beta == 0.0:
        return 0.0
    return float(beta * sum(float(np.vdot(w, w)) for w in weights))


# ---------------------------------------------------------------------------
# Dense layer
# ---------------------------------------------------------------------------


@dataclass
class DenseLayer:
    weights: np.ndarray  # [out x in]
    biases: np.ndarray  # [out]
    activation: str = "elu"
    alpha: float = 1.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"weights {self.weights.shape} and biases {self.biases.shape} disagree"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class LayerCache:
    input: np.ndarray
    pre: np.ndarray
    post: np.ndarray


def dense_forward(layer: DenseLayer, x: np.ndarray) -> LayerCache:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != layer.in_dim:
        raise ShapeError(f"input has {x.shape[1]} columns, layer expects {layer.in_dim}")
    pre = x @ layer.weights.T
    pre += layer.biases
    if layer.activation == "elu":
        post = elu(pre, layer.alpha)
    elif layer.activation == "softmax":
        post = softmax(pre)
    else:
        post = pre
    return LayerCache(x, pre, post)


def dense_backward(layer: DenseLayer, cache: LayerCache, upstream: np.ndarray,
                   need_input_grad: bool = True, weight_out: np.ndarray | None = None,
                   bias_out: np.ndarray | None = None):
    """Return ``(weight_grad, bias_grad, input_grad)``.

    ``upstream`` is dL/d(post-activation), except for softmax layers where it
    must already be dL/d(pre-activation) (see ``softmax_cross_entropy_grad``).
    ``input_grad`` is None when ``need_input_grad`` is False. ``weight_out``
    and ``bias_out`` receive the parameter gradients in place when given.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        upstream = upstream[None, :]
    if upstream.shape != cache.post.shape:
        raise ShapeError(f"upstream {upstream.shape} vs activations {cache.post.shape}")
    if layer.activation == "elu":
        # slope is 1 where post >= 0 and post + alpha (= alpha * e^x) where post < 0
        delta = np.minimum(cache.post, 0.0)
        if layer.alpha == 1.0:
            delta += 1.0
        else:
            delta += np.where(cache.post < 0.0, layer.alpha, 1.0)
        delta *= upstream
    else:
        delta = upstream
    weight_grad = np.matmul(delta.T, cache.input, out=weight_out)
    bias_grad = np.sum(delta, axis=0, out=bias_out)
    input_grad = delta @ layer.weights if need_input_grad else None
    return weight_grad, bias_grad, input_grad


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def glorot_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform Glorot weights of shape ``[fan_out x fan_in]``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_dense(fan_in: int, fan_out: int, rng: np.random.Generator,
               activation: str = "elu", alpha: float = 1.0) -> DenseLayer:
    return DenseLayer(glorot_init(fan_in, fan_out, rng), np.zeros(fan_out), activation, alpha)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr_t, beta1, beta2, eps_hat):
    # bias corrections folded into lr_t and eps_hat (one division per entry)
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr_t * mi / (np.sqrt(vi) + eps_hat)


@njit(cache=True)
def _all_finite(g):
    for i in range(g.size):
        if not np.isfinite(g[i]):
            return False
    return True


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.beta1, self.beta2, self.epsilon, self.step,
            {k: v.copy() for k, v in self.first_moment.items()},
            {k: v.copy() for k, v in self.second_moment.items()},
        )


def _flat(a: np.ndarray) -> np.ndarray:
    flat = a.reshape(-1)
    if not np.shares_memory(flat, a):
        raise ValueError("parameter blocks must be contiguous arrays")
    return flat


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray], lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``params`` and ``grads`` map block names to arrays of matching shape.
    The update is all-or-nothing: a non-finite gradient anywhere raises
    :class:`NumericError` before any block is touched.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        if not _all_finite(np.ascontiguousarray(g).reshape(-1)):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")

    state.step += 1
    corr1 = 1.0 - state.beta1 ** state.step
    corr2 = 1.0 - state.beta2 ** state.step
    lr_t = lr * np.sqrt(corr2) / corr1
    eps_hat = state.epsilon * np.sqrt(corr2)
    for name, p in params.items():
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros(p.size)
            state.second_moment[name] = np.zeros(p.size)
        _adam_kernel(_flat(p), np.ascontiguousarray(grads[name]).reshape(-1),
                     state.first_moment[name], state.second_moment[name],
                     lr_t, state.beta1, state.beta2, eps_hat)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def numeric_gradient(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` around ``params`` (restored on exit).

    Divides by the step actually taken in float64, ``fl(p + eps) - fl(p - eps)``.
    """
    flat = _flat(params)
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn(params)
        hi = flat[i]
        flat[i] = orig - eps
        down = loss_fn(params)
        lo = flat[i]
        flat[i] = orig
        grad[i] = float((up - down) / (hi - lo))
    return grad.reshape(params.shape)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_difference_gradcheck(loss_fn: Callable[[np.ndarray], float],
                                grad_fn: Callable[[np.ndarray], np.ndarray],
                                params: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between ``grad_fn(params)`` and central differences."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = np.asarray(grad_fn(params), dtype=np.float64).copy()
    numeric = numeric_gradient(loss_fn, params, eps)
    if analytic.size == 0:
        return 0.0
    return float(relative_errors(analytic, numeric).max())
