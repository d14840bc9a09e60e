# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot numeric kernels.

Mirrors ``ldc.kernels._purepy`` function for function; see that module for
the semantics. Matrix products go through BLAS ``dgemm`` (scipy's shared
BLAS); elementwise ops are fused single-pass loops that skip the
temporaries the NumPy backend allocates.
"""

import numpy as np

from libc.math cimport exp, fabs, log, sqrt
from scipy.linalg.cython_blas cimport dgemm


cdef inline void _gemm(char ta, char tb, int m, int n, int k,
                       double* a, int lda, double* b, int ldb,
                       double* c, int ldc) noexcept nogil:
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &zero, c, &ldc)


def linear_forward(const double[:, ::1] x, const double[:, ::1] weight,
                   const double[::1] bias):
    cdef Py_ssize_t nb = x.shape[0]
    cdef Py_ssize_t din = x.shape[1]
    cdef Py_ssize_t dout = weight.shape[0]
    out = np.empty((nb, dout), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t i, j
    if nb == 0:
        return out
    with nogil:
        if din > 0:
            # Row-major y = x @ W.T done as column-major y^T = W @ x^T.
            _gemm(b'T', b'N', <int>dout, <int>nb, <int>din,
                  <double*>&weight[0, 0], <int>din,
                  <double*>&x[0, 0], <int>din, &y[0, 0], <int>dout)
            for i in range(nb):
                for j in range(dout):
                    y[i, j] += bias[j]
        else:
            for i in range(nb):
                for j in range(dout):
                    y[i, j] = bias[j]
    return out


def linear_backward(const double[:, ::1] x, const double[:, ::1] weight,
                    const double[:, ::1] grad_out):
    cdef Py_ssize_t nb = x.shape[0]
    cdef Py_ssize_t din = x.shape[1]
    cdef Py_ssize_t dout = weight.shape[0]
    gx_arr = np.zeros((nb, din), dtype=np.float64)
    gw_arr = np.zeros((dout, din), dtype=np.float64)
    gb_arr = np.zeros(dout, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[:, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t i, j
    if nb == 0 or dout == 0:
        return gx_arr, gw_arr, gb_arr
    with nogil:
        if din > 0:
            _gemm(b'N', b'N', <int>din, <int>nb, <int>dout,
                  <double*>&weight[0, 0], <int>din,
                  <double*>&grad_out[0, 0], <int>dout, &gx[0, 0], <int>din)
            _gemm(b'N', b'T', <int>din, <int>dout, <int>nb,
                  <double*>&x[0, 0], <int>din,
                  <double*>&grad_out[0, 0], <int>dout, &gw[0, 0], <int>din)
        for i in range(nb):
            for j in range(dout):
                gb[j] += grad_out[i, j]
    return gx_arr, gw_arr, gb_arr


def relu(const double[:, ::1] x):
    cdef Py_ssize_t nb = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    out = np.empty((nb, d), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(nb):
            for j in range(d):
                y[i, j] = x[i, j] if x[i, j] > 0.0 else 0.0
    return out


def relu_backward(const double[:, ::1] x, const double[:, ::1] grad_out):
    cdef Py_ssize_t nb = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    out = np.empty((nb, d), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(nb):
            for j in range(d):
                gx[i, j] = grad_out[i, j] if x[i, j] > 0.0 else 0.0
    return out


def sigmoid(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    cdef const double[::1] xv = arr.reshape(-1)
    cdef double[::1] yv = out.reshape(-1)
    cdef Py_ssize_t i
    cdef double e
    with nogil:
        for i in range(xv.shape[0]):
            if xv[i] >= 0.0:
                yv[i] = 1.0 / (1.0 + exp(-xv[i]))
            else:
                e = exp(xv[i])
                yv[i] = e / (1.0 + e)
    return out


def softmax_rows(const double[:, ::1] x):
    cdef Py_ssize_t nb = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    out = np.empty((nb, d), dtype=np.float64)
    cdef double[:, ::1] p = out
    cdef Py_ssize_t i, j
    cdef double m, z
    with nogil:
        for i in range(nb):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            z = 0.0
            for j in range(d):
                p[i, j] = exp(x[i, j] - m)
                z += p[i, j]
            for j in range(d):
                p[i, j] /= z
    return out


def cross_entropy_rows(const double[:, ::1] logits, const long long[::1] labels):
    cdef Py_ssize_t nb = logits.shape[0]
    cdef Py_ssize_t d = logits.shape[1]
    losses_arr = np.empty(nb, dtype=np.float64)
    grad_arr = np.empty((nb, d), dtype=np.float64)
    cdef double[::1] losses = losses_arr
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t i, j
    cdef double m, z
    with nogil:
        for i in range(nb):
            m = logits[i, 0]
            for j in range(1, d):
                if logits[i, j] > m:
                    m = logits[i, j]
            z = 0.0
            for j in range(d):
                grad[i, j] = exp(logits[i, j] - m)
                z += grad[i, j]
            losses[i] = log(z) - (logits[i, labels[i]] - m)
            for j in range(d):
                grad[i, j] /= z
            grad[i, labels[i]] -= 1.0
    return losses_arr, grad_arr


def prob_nll_rows(const double[:, ::1] scores, const long long[::1] labels,
                  double eps):
    cdef Py_ssize_t nb = scores.shape[0]
    cdef Py_ssize_t d = scores.shape[1]
    losses_arr = np.empty(nb, dtype=np.float64)
    grad_arr = np.empty((nb, d), dtype=np.float64)
    cdef double[::1] losses = losses_arr
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t i, j, y
    cdef double z, c
    with nogil:
        for i in range(nb):
            z = 0.0
            for j in range(d):
                z += scores[i, j] if scores[i, j] > eps else eps
            y = labels[i]
            c = scores[i, y] if scores[i, y] > eps else eps
            losses[i] = log(z) - log(c)
            for j in range(d):
                grad[i, j] = 1.0 / z if scores[i, j] > eps else 0.0
            if scores[i, y] > eps:
                grad[i, y] -= 1.0 / c
    return losses_arr, grad_arr


def l1_rows(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t nb = a.shape[0]
    cdef Py_ssize_t d = a.shape[1]
    losses_arr = np.zeros(nb, dtype=np.float64)
    grad_arr = np.empty((nb, d), dtype=np.float64)
    cdef double[::1] losses = losses_arr
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t i, j
    cdef double diff
    with nogil:
        for i in range(nb):
            for j in range(d):
                diff = a[i, j] - b[i, j]
                losses[i] += fabs(diff)
                grad[i, j] = 1.0 if diff > 0.0 else (-1.0 if diff < 0.0 else 0.0)
    return losses_arr, grad_arr


def adamw_update(param, grad, m, v, long long t, double lr, double beta1,
                 double beta2, double eps, double weight_decay):
    cdef double[::1] p = param.reshape(-1)
    cdef const double[::1] g = grad.reshape(-1)
    cdef double[::1] mm = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef double c1 = 1.0 - beta1**t
    cdef double c2 = 1.0 - beta2**t
    cdef double decay = 1.0 - lr * weight_decay
    cdef Py_ssize_t i
    with nogil:
        for i in range(p.shape[0]):
            if weight_decay != 0.0:
                p[i] *= decay
            mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i]
            vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i]
            p[i] -= lr * (mm[i] / c1) / (sqrt(vv[i] / c2) + eps)
