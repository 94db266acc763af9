"""Forward/backward primitives for the mask estimator.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes ``(dout, cache)`` and returns the input gradient plus a dict of
parameter gradients where applicable. Tensors are [B, C, T, F] unless noted.
"""
import numpy as np

from .. import kernels

BN_EPS = 1e-5


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _rowdot(a, W):
    """``a @ W.T`` for tiny matrices with a summation order independent of batch size."""
    return (a[:, None, :] * W[None, :, :]).sum(axis=-1)


# ---------------------------------------------------------------------------
# squeeze-and-excitation gate
# ---------------------------------------------------------------------------


def se_weights_forward(x, W1, b1, W2, b2):
    """Channel weights ``sigmoid(W2 relu(W1 s + b1) + b2)`` with ``s`` the T-F mean."""
    s = x.mean(axis=(2, 3))
    a1 = _rowdot(s, W1) + b1
    h = np.maximum(a1, 0)
    a2 = _rowdot(h, W2) + b2
    w = sigmoid(a2)
    return w, (x.shape, s, a1, h, w, W1, W2)


def se_weights_backward(dw, cache):
    shape, s, a1, h, w, W1, W2 = cache
    da2 = dw * w * (1 - w)
    g = {"se_W2": da2.T @ h, "se_b2": da2.sum(0)}
    dh = da2 @ W2
    da1 = dh * (a1 > 0)
    g["se_W1"] = da1.T @ s
    g["se_b1"] = da1.sum(0)
    ds = da1 @ W1
    T, F = shape[2], shape[3]
    dx = np.broadcast_to(ds[:, :, None, None] / (T * F), shape)
    return dx, g


def gate_forward(x, w):
    return x * w[:, :, None, None], (x, w)


def gate_backward(dout, cache):
    x, w = cache
    return dout * w[:, :, None, None], (dout * x).sum(axis=(2, 3))


def se_forward(x, W1, b1, W2, b2):
    """Full SE block: returns (gated x, weights, cache)."""
    w, c1 = se_weights_forward(x, W1, b1, W2, b2)
    y, c2 = gate_forward(x, w)
    return y, w, (c1, c2)


def se_backward(dy, cache):
    c1, c2 = cache
    dx_gate, dw = gate_backward(dy, c2)
    dx_se, g = se_weights_backward(dw, c1)
    return dx_gate + dx_se, g


# ---------------------------------------------------------------------------
# convolution, batch norm, pooling
# ---------------------------------------------------------------------------


def conv_forward(x, W, b=None):
    """Odd-kernel zero-padded convolution, stride 1. ``W`` is [Co, Ci, kt, kf]."""
    B, C, T, F = x.shape
    Co, _, kt, kf = W.shape
    cols = kernels.im2col(x, kt, kf)
    out = cols @ W.reshape(Co, -1).T
    if b is not None:
        out += b
    out = out.reshape(B, T, F, Co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, W)


def conv_backward(dout, cache):
    shape, cols, W = cache
    Co, _, kt, kf = W.shape
    d = dout.transpose(0, 2, 3, 1).reshape(-1, Co)
    dW = (d.T @ cols).reshape(W.shape)
    db = d.sum(axis=0)
    dx = kernels.col2im(d @ W.reshape(Co, -1), shape, kt, kf)
    return dx, dW, db


def bn_forward(x, gamma, beta, running, train, momentum=0.1):
    """Per-channel batch norm over (B, T, F). ``running`` = [mean, var], updated in place."""
    if train:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running[0] = (1 - momentum) * running[0] + momentum * mu
        running[1] = (1 - momentum) * running[1] + momentum * var
    else:
        mu, var = running
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv, gamma)


def bn_backward(dout, cache):
    """Training-mode batch norm gradient."""
    xhat, inv, gamma = cache
    n = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    dx = (inv[None, :, None, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def pool_forward(x, p):
    out, arg = kernels.maxpool_freq(x, p)
    return out, (arg, p, x.shape[3])


def pool_backward(dout, cache):
    arg, p, F = cache
    return kernels.maxpool_freq_backward(dout, arg, p, F)


# ---------------------------------------------------------------------------
# temporal convolution and dense head, tensors [B, T, D]
# ---------------------------------------------------------------------------


def tconv_forward(x, W, b):
    """Zero-padded 1-D convolution over time. ``W`` is [k*D, H]."""
    B, T, D = x.shape
    k = W.shape[0] // D
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # [B, T, D, k]
    cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 2)).reshape(B * T, k * D)
    out = (cols @ W + b).reshape(B, T, -1)
    return out, (x.shape, cols, W, k)


def tconv_backward(dout, cache):
    shape, cols, W, k = cache
    B, T, D = shape
    p = k // 2
    d = dout.reshape(B * T, -1)
    dW = cols.T @ d
    db = d.sum(axis=0)
    dcols = (d @ W.T).reshape(B, T, k, D)
    dxp = np.zeros((B, T + 2 * p, D), dtype=dout.dtype)
    for i in range(k):
        dxp[:, i:i + T] += dcols[:, :, i]
    return dxp[:, p:p + T], dW, db


def dense_forward(x, W, b):
    B, T, H = x.shape
    out = (x.reshape(B * T, H) @ W + b).reshape(B, T, -1)
    return out, (x, W)


def dense_backward(dout, cache):
    x, W = cache
    B, T, H = x.shape
    d = dout.reshape(B * T, -1)
    xf = x.reshape(B * T, H)
    return (d @ W.T).reshape(B, T, H), xf.T @ d, d.sum(axis=0)
