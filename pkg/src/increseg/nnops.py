"""Array primitives for the segmentation network, forward and backward.

Everything is NHWC. Forward functions return (output, cache); backward
functions take the upstream gradient plus the cache and return input/parameter
gradients. Shapes are exact: no implicit padding beyond the stated conv pad.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3x3(x, w, b):
    """3x3 convolution, stride 1, pad 1. x: (N,H,W,Ci), w: (3,3,Ci,Co), b: (Co,)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N,H,W,Ci,3,3)
    y = np.einsum("nhwcuv,uvco->nhwo", win, w, optimize=True) + b
    return y, (x, w)


def conv3x3_back(dy, cache):
    x, w = cache
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    dw = np.einsum("nhwcuv,nhwo->uvco", win, dy, optimize=True)
    db = dy.sum(axis=(0, 1, 2))
    dyp = np.pad(dy, ((0, 0), (1, 1), (1, 1), (0, 0)))
    wout = sliding_window_view(dyp, (3, 3), axis=(1, 2))  # (N,H,W,Co,3,3)
    wf = w[::-1, ::-1]  # rotate kernel 180 degrees
    dx = np.einsum("nhwouv,uvco->nhwc", wout, wf, optimize=True)
    return dx, dw, db


def maxpool2(x):
    """2x2 max pooling, stride 2. Ties take the first window position."""
    n, h, w, c = x.shape
    x6 = x.reshape(n, h // 2, 2, w // 2, 2, c)
    flat = x6.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2_back(dy, cache):
    idx, shape = cache
    n, h, w, c = shape
    flat = np.zeros((n, h // 2, w // 2, c, 4), dtype=dy.dtype)
    np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
    return (
        flat.reshape(n, h // 2, w // 2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, h, w, c)
    )


def deconv2(x, w, b):
    """2x2 transposed convolution, stride 2 (exact x2 upsampling).

    x: (N,H,W,Ci), w: (Ci,Co,2,2), b: (Co,). Output blocks do not overlap.
    """
    n, h, ww, _ = x.shape
    co = w.shape[1]
    y6 = np.einsum("nhwc,cokl->nhkwlo", x, w, optimize=True)
    y = y6.reshape(n, 2 * h, 2 * ww, co) + b
    return y, (x, w)


def deconv2_back(dy, cache):
    x, w = cache
    n, h, ww, _ = x.shape
    co = w.shape[1]
    dy6 = dy.reshape(n, h, 2, ww, 2, co)
    dx = np.einsum("nhkwlo,cokl->nhwc", dy6, w, optimize=True)
    dw = np.einsum("nhwc,nhkwlo->cokl", x, dy6, optimize=True)
    db = dy.sum(axis=(0, 1, 2))
    return dx, dw, db


def relu(x):
    y = np.maximum(x, 0)
    return y, (x > 0)


def relu_back(dy, mask):
    return dy * mask


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def xavier_uniform(rng: np.random.Generator, shape, fan_in, fan_out, dtype):
    """Glorot uniform: U[-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)
