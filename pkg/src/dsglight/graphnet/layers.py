"""Network building blocks with hand-written forward/backward passes.

Everything runs in float64 numpy. Convolutions use a 9-tap decomposition
(one matmul per kernel offset) rather than im2col scatter, which keeps the
backward pass BLAS-bound.
"""

import math

import numpy as np


def xavier_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0.0)


def softplus_forward(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_backward(dy, x):
    return dy * sigmoid(x)


def _same_pads(size, kernel, stride):
    out = -(-size // stride)  # ceil division
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv2d_forward(x, w, b, stride=2):
    """Strided 2-D convolution with SAME padding.

    x: (B, H, W, Cin); w: (kh, kw, Cin, Cout); b: (Cout,).
    Returns (y, cache) with y: (B, OH, OW, Cout).
    """
    batch, h, width, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ValueError(f"kernel expects {wcin} input channels, image has {cin}")
    oh, pt, pb = _same_pads(h, kh, stride)
    ow, pl, pr = _same_pads(width, kw, stride)
    xpad = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    y = np.tile(b, (batch, oh, ow, 1))
    for ki in range(kh):
        for kj in range(kw):
            patch = xpad[:, ki:ki + oh * stride:stride,
                         kj:kj + ow * stride:stride, :]
            y += patch @ w[ki, kj]
    cache = (xpad, x.shape, (pt, pl), w, stride, (oh, ow))
    return y, cache


def conv2d_backward(dy, cache, need_dx=True):
    """Gradients of conv2d_forward; returns (dx, dw, db)."""
    xpad, x_shape, (pt, pl), w, stride, (oh, ow) = cache
    kh, kw, cin, cout = w.shape
    batch, h, width, _ = x_shape
    dw = np.zeros_like(w)
    db = dy.sum(axis=(0, 1, 2))
    dxpad = np.zeros_like(xpad) if need_dx else None
    for ki in range(kh):
        for kj in range(kw):
            patch = xpad[:, ki:ki + oh * stride:stride,
                         kj:kj + ow * stride:stride, :]
            dw[ki, kj] = np.einsum("bhwc,bhwd->cd", patch, dy)
            if need_dx:
                dxpad[:, ki:ki + oh * stride:stride,
                      kj:kj + ow * stride:stride, :] += dy @ w[ki, kj].T
    if not need_dx:
        return None, dw, db
    dx = dxpad[:, pt:pt + h, pl:pl + width, :]
    return dx, dw, db


def fc_forward(x, w, b):
    """Affine layer; x: (B, Fin), w: (Fin, Fout)."""
    return x @ w + b


def fc_backward(dy, x, w):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def gcn_layer_forward(h, e_norm, w, activation="relu"):
    """One graph convolution: activation(E @ H @ W).

    h: (N, Fin); e_norm: (N, N) normalized adjacency; w: (Fin, Fout);
    activation is "relu" or "linear" (output layer).
    """
    if activation not in ("relu", "linear"):
        raise ValueError(f"unknown activation {activation!r}")
    if h.ndim != 2 or w.ndim != 2 or h.shape[1] != w.shape[0]:
        raise ValueError(f"shape mismatch: H {h.shape} vs W {w.shape}")
    if e_norm.shape != (h.shape[0], h.shape[0]):
        raise ValueError(f"adjacency {e_norm.shape} does not match H {h.shape}")
    mixed = e_norm @ h
    pre = mixed @ w
    out = relu_forward(pre) if activation == "relu" else pre
    cache = (h, e_norm, w, mixed, pre, activation)
    return out, cache


def gcn_layer_backward(dy, cache):
    h, e_norm, w, mixed, pre, activation = cache
    dpre = relu_backward(dy, pre) if activation == "relu" else dy
    dw = mixed.T @ dpre
    dmixed = dpre @ w.T
    dh = e_norm.T @ dmixed
    return dh, dw
