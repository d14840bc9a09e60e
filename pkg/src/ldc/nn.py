"""Dense-network numerical core.

Double-precision forward/backward building blocks for the deconfusion
head: linear layers, ReLU, sigmoid, softmax, cross-entropy, L1 loss, the
AdamW optimizer, and a central-finite-difference gradient checker that
serves as the independent oracle for every analytic gradient in the
package.

All functions are pure over caller-owned numpy buffers (AdamW mutates the
arrays it is handed, which is its contract). Vectors are 1-D float64
arrays; batched variants take row-major 2-D arrays with one sample per
row. Shape validation happens here; the ``ldc.kernels`` backend underneath
assumes validated, contiguous input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError, shape_check


def as_f64(x, name: str = "array") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    return arr


def _as_batch(x) -> tuple[np.ndarray, bool]:
    """Promote a vector to a 1-row batch; report whether it was a vector."""
    arr = as_f64(x)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ShapeError(f"expected a vector or batch of vectors, got ndim={arr.ndim}")


@dataclass
class LinearLayer:
    """Affine map y = W x + b with weight (out, in) and bias (out,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = as_f64(self.weight)
        self.bias = as_f64(self.bias)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("LinearLayer needs a 2-D weight and 1-D bias")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"weight rows ({self.weight.shape[0]}) != bias length "
                f"({self.bias.shape[0]})"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weight.copy(), self.bias.copy())


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int,
                scale: str = "glorot") -> LinearLayer:
    """Seeded init: Glorot-normal weights ("glorot") or all zeros ("zero")."""
    if scale == "zero":
        weight = np.zeros((out_dim, in_dim))
    elif scale == "glorot":
        std = np.sqrt(2.0 / (in_dim + out_dim))
        weight = rng.normal(0.0, std, size=(out_dim, in_dim))
    else:
        raise ValueError(f"unknown init scale {scale!r}")
    return LinearLayer(weight, np.zeros(out_dim))


def linear_forward(x, layer: LinearLayer) -> np.ndarray:
    """W x + b for a vector, or row-wise for a batch."""
    batch, was_vec = _as_batch(x)
    shape_check(
        batch.shape[1] == layer.in_dim,
        f"linear_forward: input dim {batch.shape[1]} != layer input dim {layer.in_dim}",
    )
    out = kernels.linear_forward(batch, layer.weight, layer.bias)
    return out[0] if was_vec else out


def linear_backward(x, layer: LinearLayer, grad_out):
    """Gradients (grad_x, grad_weight, grad_bias) for upstream grad_out."""
    batch, was_vec = _as_batch(x)
    gout, _ = _as_batch(grad_out)
    shape_check(batch.shape[1] == layer.in_dim, "linear_backward: input dim mismatch")
    shape_check(
        gout.shape == (batch.shape[0], layer.out_dim),
        f"linear_backward: grad_out shape {gout.shape} != "
        f"({batch.shape[0]}, {layer.out_dim})",
    )
    grad_x, grad_w, grad_b = kernels.linear_backward(batch, layer.weight, gout)
    return (grad_x[0] if was_vec else grad_x), grad_w, grad_b


def relu(x) -> np.ndarray:
    batch, was_vec = _as_batch(x)
    out = kernels.relu(batch)
    return out[0] if was_vec else out


def relu_backward(x, grad_out) -> np.ndarray:
    batch, was_vec = _as_batch(x)
    gout, _ = _as_batch(grad_out)
    shape_check(batch.shape == gout.shape, "relu_backward: shape mismatch")
    out = kernels.relu_backward(batch, gout)
    return out[0] if was_vec else out


def sigmoid(x) -> np.ndarray:
    return kernels.sigmoid(as_f64(x))


def softmax(v) -> np.ndarray:
    """Max-shifted softmax; rejects non-finite input."""
    batch, was_vec = _as_batch(v)
    if not np.isfinite(batch).all():
        raise NumericError("softmax received non-finite input")
    out = kernels.softmax_rows(batch)
    return out[0] if was_vec else out


def cross_entropy(logits, label):
    """-log softmax(logits)[label] with its gradient w.r.t. the raw logits.

    Accepts a single vector with an integer label, or a batch with a label
    per row (losses and gradients are then per-row, no batch reduction).
    """
    batch, was_vec = _as_batch(logits)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    shape_check(
        labels.shape[0] == batch.shape[0],
        f"cross_entropy: {labels.shape[0]} labels for {batch.shape[0]} rows",
    )
    n_classes = batch.shape[1]
    if np.any((labels < 0) | (labels >= n_classes)):
        bad = int(labels[(labels < 0) | (labels >= n_classes)][0])
        raise IndexError(f"label {bad} out of range for {n_classes} classes")
    losses, grad = kernels.cross_entropy_rows(batch, np.ascontiguousarray(labels))
    if was_vec:
        return float(losses[0]), grad[0]
    return losses, grad


def l1_loss(a, b):
    """Sum-reduced |a - b| with the subgradient w.r.t. ``a`` (sign(0) = 0)."""
    ab, a_vec = _as_batch(a)
    bb, _ = _as_batch(b)
    shape_check(ab.shape == bb.shape, f"l1_loss: shapes {ab.shape} vs {bb.shape}")
    losses, grad = kernels.l1_rows(ab, bb)
    if a_vec:
        return float(losses[0]), grad[0]
    return losses, grad


@dataclass
class AdamWState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adamw(params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 1e-2) -> AdamWState:
    state = AdamWState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                       weight_decay=weight_decay)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState):
    """One decoupled-weight-decay Adam step over every parameter, in place.

    Decay is applied as p <- p - lr*wd*p before the moment update. Returns
    (params, state) for call-site chaining; both are mutated.
    """
    state.t += 1
    for name, p in params.items():
        g = grads[name]
        shape_check(
            g.shape == p.shape,
            f"adamw_step: grad shape {g.shape} != param shape {p.shape} for {name!r}",
        )
        kernels.adamw_update(p, as_f64(g), state.m[name], state.v[name],
                             state.t, state.lr, state.beta1, state.beta2,
                             state.eps, state.weight_decay)
    return params, state


def finite_diff_grad(f, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient (f(x+eps e_i) - f(x-eps e_i)) / 2 eps.

    ``f`` maps a flat vector to a scalar. This is the oracle the analytic
    backward passes are verified against; it must stay independent of them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_f64(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(x)
        flat[i] = orig - eps
        f_minus = f(x)
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor) over both arrays."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))
