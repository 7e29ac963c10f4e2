"""Minimal neural net ops on numpy arrays, NHWC layout.

Forward and backward passes are hand written; every op keeps the dtype
of its inputs so unit tests can run the exact same code in float64
against finite differences while the pipeline runs float32.
"""

from __future__ import annotations

import numpy as np


def conv2d(x, w, b=None, stride=1, pad=None):
    """2-D convolution (cross-correlation), zero padded.

    x: (B, H, W, Cin), w: (kh, kw, Cin, Cout), b: (Cout,) or None.
    pad defaults to (k - 1) // 2 per side ("same" when stride is 1).
    """
    kh, kw = w.shape[0], w.shape[1]
    if pad is None:
        pad = (kh - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, Ho, Wo, Cin, kh, kw)
    y = np.tensordot(win, w, axes=((4, 5, 3), (0, 1, 2)))
    if b is not None:
        y = y + b
    return y


def conv2d_backward(x, w, dy, stride=1, pad=None):
    """Gradients of conv2d w.r.t. input, weights and bias.

    Returns (dx, dw, db). Recomputes the window view from x, so no
    forward cache is needed.
    """
    kh, kw = w.shape[0], w.shape[1]
    if pad is None:
        pad = (kh - 1) // 2
    B, H, W, _ = x.shape
    Ho, Wo = dy.shape[1], dy.shape[2]

    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    dw = np.tensordot(win, dy, axes=((0, 1, 2), (0, 1, 2)))  # (Cin, kh, kw, Cout)
    dw = dw.transpose(1, 2, 0, 3)
    db = dy.sum(axis=(0, 1, 2))

    # dpatches: (B, Ho, Wo, kh, kw, Cin), scattered back over k*k offsets.
    dpatch = np.tensordot(dy, w, axes=((3,), (3,)))
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                dpatch[:, :, :, i, j, :]
    dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
    return dx, dw, db


def leaky_relu(x, slope):
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(x, dy, slope):
    return np.where(x >= 0, dy, slope * dy)


def sigmoid(x):
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(x.dtype.type(0), x)


def softplus_backward(x, dy):
    return sigmoid(x) * dy


def he_init(rng, kh, kw, cin, cout, dtype=np.float32):
    """Scaled normal init for a conv weight tensor."""
    std = np.sqrt(2.0 / (kh * kw * cin))
    return (rng.standard_normal((kh, kw, cin, cout)) * std).astype(dtype)
