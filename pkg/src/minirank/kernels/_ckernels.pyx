# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the encoder's inner loops.

Same signatures and semantics as ``pykernels``; selected automatically by
``minirank.kernels`` when this extension is importable.
"""

from libc.math cimport exp, sqrt, tanh

import numpy as np


cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_A = 0.044715


def layer_norm_forward(double[:, ::1] x, double[::1] gain, double[::1] bias,
                       double eps=1e-12):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double acc, mu, var, rs, xh
    y_arr = np.empty((n, h), dtype=np.float64)
    mean_arr = np.empty(n, dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] rstd = rstd_arr
    for i in range(n):
        acc = 0.0
        for j in range(h):
            acc += x[i, j]
        mu = acc / h
        acc = 0.0
        for j in range(h):
            acc += (x[i, j] - mu) * (x[i, j] - mu)
        var = acc / h
        rs = 1.0 / sqrt(var + eps)
        mean[i] = mu
        rstd[i] = rs
        for j in range(h):
            xh = (x[i, j] - mu) * rs
            y[i, j] = xh * gain[j] + bias[j]
    return y_arr, mean_arr, rstd_arr


def layer_norm_backward(double[:, ::1] dy, double[:, ::1] x, double[::1] mean,
                        double[::1] rstd, double[::1] gain):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double m1, m2, xh, dxh
    dx_arr = np.empty((n, h), dtype=np.float64)
    dgain_arr = np.zeros(h, dtype=np.float64)
    dbias_arr = np.zeros(h, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(h):
            xh = (x[i, j] - mean[i]) * rstd[i]
            dxh = dy[i, j] * gain[j]
            m1 += dxh
            m2 += dxh * xh
            dgain[j] += dy[i, j] * xh
            dbias[j] += dy[i, j]
        m1 /= h
        m2 /= h
        for j in range(h):
            xh = (x[i, j] - mean[i]) * rstd[i]
            dxh = dy[i, j] * gain[j]
            dx[i, j] = (dxh - m1 - xh * m2) * rstd[i]
    return dx_arr, dgain_arr, dbias_arr


cdef void _gelu_fwd(double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    cdef double t
    for i in range(x.shape[0]):
        t = tanh(GELU_C * (x[i] + GELU_A * x[i] * x[i] * x[i]))
        out[i] = 0.5 * x[i] * (1.0 + t)


cdef void _gelu_bwd(double[::1] x, double[::1] dy, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    cdef double t, du
    for i in range(x.shape[0]):
        t = tanh(GELU_C * (x[i] + GELU_A * x[i] * x[i] * x[i]))
        du = GELU_C * (1.0 + 3.0 * GELU_A * x[i] * x[i])
        out[i] = dy[i] * (0.5 * (1.0 + t) + 0.5 * x[i] * (1.0 - t * t) * du)


def gelu_forward(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(x)
    _gelu_fwd(x.reshape(-1), out.reshape(-1))
    return out


def gelu_backward(x, dy):
    x = np.ascontiguousarray(x, dtype=np.float64)
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    out = np.empty_like(x)
    _gelu_bwd(x.reshape(-1), dy.reshape(-1), out.reshape(-1))
    return out


def masked_softmax_forward(double[:, :, :, ::1] scores, double[:, ::1] key_mask):
    cdef Py_ssize_t nb = scores.shape[0], nh = scores.shape[1]
    cdef Py_ssize_t nq = scores.shape[2], nk = scores.shape[3]
    cdef Py_ssize_t b, h, i, j
    cdef double m, tot, e
    probs_arr = np.empty((nb, nh, nq, nk), dtype=np.float64)
    cdef double[:, :, :, ::1] probs = probs_arr
    for b in range(nb):
        for h in range(nh):
            for i in range(nq):
                m = -1e308
                for j in range(nk):
                    if key_mask[b, j] > 0.0 and scores[b, h, i, j] > m:
                        m = scores[b, h, i, j]
                tot = 0.0
                for j in range(nk):
                    if key_mask[b, j] > 0.0:
                        e = exp(scores[b, h, i, j] - m)
                        probs[b, h, i, j] = e
                        tot += e
                    else:
                        probs[b, h, i, j] = 0.0
                for j in range(nk):
                    probs[b, h, i, j] /= tot
    return probs_arr


def masked_softmax_backward(double[:, :, :, ::1] probs, double[:, :, :, ::1] dprobs):
    cdef Py_ssize_t nb = probs.shape[0], nh = probs.shape[1]
    cdef Py_ssize_t nq = probs.shape[2], nk = probs.shape[3]
    cdef Py_ssize_t b, h, i, j
    cdef double rowdot
    out_arr = np.empty((nb, nh, nq, nk), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    for b in range(nb):
        for h in range(nh):
            for i in range(nq):
                rowdot = 0.0
                for j in range(nk):
                    rowdot += probs[b, h, i, j] * dprobs[b, h, i, j]
                for j in range(nk):
                    out[b, h, i, j] = probs[b, h, i, j] * (dprobs[b, h, i, j] - rowdot)
    return out_arr
