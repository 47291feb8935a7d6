"""NumPy reference implementations of the encoder's inner kernels.

These are the fallback backend; the compiled twin in ``_ckernels.pyx``
implements the same functions with the same semantics. All inputs are
C-contiguous float64 arrays.
"""

import numpy as np


GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715


def layer_norm_forward(x, gain, bias, eps=1e-12):
    """Row-normalize ``x`` (N, H). Returns (y, mean, rstd) with per-row stats."""
    mean = x.mean(axis=1)
    rstd = 1.0 / np.sqrt(x.var(axis=1) + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gain + bias, mean, rstd


def layer_norm_backward(dy, x, mean, rstd, gain):
    """Gradients of layer norm. Returns (dx, dgain, dbias)."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgain, dbias


def gelu_forward(x):
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))."""
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t)


def gelu_backward(x, dy):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def masked_softmax_forward(scores, key_mask):
    """Softmax over the last axis of (B, h, L, L) attention scores.

    key_mask (B, L): keys with mask 0 get probability exactly 0; each row
    normalizes over the surviving keys only.
    """
    gate = key_mask[:, None, None, :] > 0.0
    s = np.where(gate, scores, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    e = np.where(gate, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_backward(probs, dprobs):
    """Jacobian-vector product of the row softmax (masked rows have probs 0)."""
    rowdot = (probs * dprobs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - rowdot)
