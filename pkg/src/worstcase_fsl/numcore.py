"""Dense float64 kernels: affine/relu/softmax passes, SGD, finite differences.

Tensors are plain ``numpy.ndarray`` objects with dtype float64. Layouts are
row-major with the batch on axis 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


@dataclass
class Param:
    """A learnable array plus its gradient and momentum buffer."""

    value: np.ndarray
    grad: np.ndarray = None
    momentum_buf: np.ndarray = None
    frozen: bool = False
    is_bias: bool = False

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum_buf is None:
            self.momentum_buf = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape or self.momentum_buf.shape != self.value.shape:
            raise DimensionError(
                f"grad/momentum shapes {self.grad.shape}/{self.momentum_buf.shape} "
                f"differ from value shape {self.value.shape}"
            )

    def zero_grad(self):
        self.grad.fill(0.0)

    def copy(self) -> "Param":
        return Param(self.value.copy(), self.grad.copy(), self.momentum_buf.copy(), self.frozen)


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    # biases are decayed like every other parameter unless this is turned off
    decay_biases: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def _check_affine(x, weight, bias=None):
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"expected 2-D input and weight, got {x.ndim}-D and {weight.ndim}-D")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"input axis 1 (d_in={x.shape[1]}) does not match weight axis 0 ({weight.shape[0]})"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"bias shape {bias.shape} does not match weight axis 1 (d_out={weight.shape[1]})"
        )


def affine_forward(x, weight, bias) -> np.ndarray:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check_affine(x, weight, bias)
    return x @ weight + bias


def affine_backward(x, weight, upstream):
    """Return ``(grad_input, grad_weight, grad_bias)`` for ``x @ weight + bias``."""
    x, weight, upstream = as_tensor(x), as_tensor(weight), as_tensor(upstream)
    _check_affine(x, weight)
    if upstream.shape != (x.shape[0], weight.shape[1]):
        raise DimensionError(
            f"upstream shape {upstream.shape} != (batch={x.shape[0]}, d_out={weight.shape[1]})"
        )
    return upstream @ weight.T, x.T @ upstream, upstream.sum(axis=0)


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x, upstream) -> np.ndarray:
    # subgradient at exactly 0 is 0
    x, upstream = as_tensor(x), as_tensor(upstream)
    return np.where(x > 0, upstream, 0.0)


def softmax(logits, axis=-1) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sgd_step(params: Sequence[Param], cfg: SgdConfig):
    """Heavy-ball SGD with weight decay folded into the gradient.

    Frozen params keep their value bit-for-bit. All gradients are zeroed
    afterwards, frozen or not.
    """
    for p in params:
        if not p.frozen:
            wd = 0.0 if p.is_bias and not cfg.decay_biases else cfg.weight_decay
            g = p.grad + wd * p.value if wd else p.grad
            if cfg.momentum:
                p.momentum_buf *= cfg.momentum
                p.momentum_buf += g
                p.value -= cfg.learning_rate * p.momentum_buf
            else:
                p.momentum_buf[...] = g
                p.value -= cfg.learning_rate * g
        p.zero_grad()


def relative_error(analytic, numeric) -> np.ndarray:
    analytic, numeric = as_tensor(analytic), as_tensor(numeric)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def numeric_gradient(loss_fn: Callable[[], float], params: Sequence[Param], h=1e-5):
    """Central-difference gradient of ``loss_fn`` w.r.t. each param's value."""
    grads = []
    for p in params:
        flat = p.value.reshape(-1)
        g = np.empty(flat.shape, dtype=DTYPE)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = float(loss_fn())
            flat[i] = orig - h
            minus = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise FloatingPointError(
                    f"non-finite loss while perturbing coordinate {i} of a {p.value.shape} param "
                    f"(L+={plus}, L-={minus})"
                )
            g[i] = (plus - minus) / (2 * h)
        grads.append(g.reshape(p.value.shape))
    return grads


def finite_diff_check(loss_fn: Callable[[], float], params: Sequence[Param], h=1e-5,
                      analytic: Sequence[np.ndarray] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` takes no arguments and reads the current param values.
    Analytic gradients default to each ``param.grad``, so populate them first.
    Param values are restored exactly after each perturbation.
    """
    base = float(loss_fn())
    if not np.isfinite(base):
        raise FloatingPointError(f"loss is not finite at the check point: {base}")
    if analytic is None:
        analytic = [p.grad for p in params]
    numeric = numeric_gradient(loss_fn, params, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(relative_error(a, n).max()))
    return worst
