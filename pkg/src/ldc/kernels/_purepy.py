"""NumPy implementations of the hot numeric kernels.

This is the fallback backend; ``ldc.kernels._core`` is the compiled twin
with identical signatures and semantics. All functions take and return
C-contiguous float64 arrays, operate batch-first (rows are samples), and
never validate shapes — validation lives in the callers (``ldc.nn``).
"""

import numpy as np


def linear_forward(x, weight, bias):
    """y = x @ W.T + b for a batch of row vectors."""
    return x @ weight.T + bias


def linear_backward(x, weight, grad_out):
    """Gradients of a linear layer given upstream grad_out (same shape as y)."""
    grad_x = grad_out @ weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    """Upstream gradient masked by the forward input (derivative 0 at x <= 0)."""
    return np.where(x > 0.0, grad_out, 0.0)


def sigmoid(x):
    # Split by sign so neither branch exponentiates a large positive value.
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_rows(logits, labels):
    """Per-row -log softmax(logits)[label] and its gradient w.r.t. logits.

    Returns (losses (B,), grad (B,C)); grad rows are softmax(row) - one_hot.
    """
    rows = np.arange(logits.shape[0])
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1)
    losses = np.log(z) - shifted[rows, labels]
    grad = e / z[:, None]
    grad[rows, labels] -= 1.0
    return losses, grad


def prob_nll_rows(scores, labels, eps):
    """Negative log likelihood over linearly-normalized, clamped scores.

    Rows are treated as unnormalized probabilities: p = c / sum(c) with
    c = max(score, eps). Returns per-row losses and the gradient w.r.t.
    the raw scores (zero through clamped coordinates).
    """
    rows = np.arange(scores.shape[0])
    active = scores > eps
    clamped = np.where(active, scores, eps)
    z = clamped.sum(axis=1)
    losses = np.log(z) - np.log(clamped[rows, labels])
    grad = np.where(active, 1.0 / z[:, None], 0.0)
    grad[rows, labels] -= np.where(active[rows, labels],
                                   1.0 / clamped[rows, labels], 0.0)
    return losses, grad


def l1_rows(a, b):
    """Per-row sum |a - b| and subgradient w.r.t. a (sign, with sign(0) = 0)."""
    d = a - b
    return np.abs(d).sum(axis=1), np.sign(d)


def adamw_update(param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay Adam step, in place.

    ``t`` is the already-incremented step counter (>= 1). Decay is applied
    to the parameter before the moment update, scaled by the learning rate.
    """
    if weight_decay != 0.0:
        param *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
