"""Dense layer kernels: conv2d, max pooling, linear, ReLU, softmax cross-entropy.

Everything operates on plain numpy arrays in NCHW layout. Forward functions
return (output, cache); backward functions consume the cache and return input
and parameter gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with the requested op."""


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Return patches of shape [B, Ho*Wo, C*k*k]."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # windows: [B, C, Ho, Wo, k, k]
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo, k, _ = win.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * k * k)
    return np.ascontiguousarray(cols)


def conv2d_forward(x, w, b, stride=1, padding=0):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input/weights, got {x.shape} / {w.shape}")
    batch, c_in, h, width = x.shape
    c_out, c_in_w, k, k2 = w.shape
    if c_in != c_in_w or k != k2:
        raise ShapeError(f"conv2d weight {w.shape} incompatible with input {x.shape}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({c_out},)")
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(width, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, k={k}")
    cols = _im2col(x, k, stride, padding)
    out = cols @ w.reshape(c_out, -1).T + b
    out = out.transpose(0, 2, 1).reshape(batch, c_out, ho, wo)
    cache = (x.shape, cols, w, stride, padding, (ho, wo))
    return out, cache


def conv2d_backward(dout, cache):
    x_shape, cols, w, stride, padding, (ho, wo) = cache
    batch, c_in, h, width = x_shape
    c_out, _, k, _ = w.shape
    d2 = dout.reshape(batch, c_out, ho * wo).transpose(0, 2, 1)  # [B, L, F]
    dw = np.einsum("blf,blc->fc", d2, cols).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dcols = d2 @ w.reshape(c_out, -1)  # [B, L, C*k*k]
    dcols = dcols.reshape(batch, ho, wo, c_in, k, k)
    dxp = np.zeros((batch, c_in, h + 2 * padding, width + 2 * padding), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        dx = dxp[:, :, padding:-padding, padding:-padding]
    else:
        dx = dxp
    return dx, dw, db


def maxpool2d_forward(x, size=2):
    batch, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"maxpool size {size} does not divide input {x.shape}")
    ho, wo = h // size, w // size
    v = x.reshape(batch, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    v = v.reshape(batch, c, ho, wo, size * size)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, size, idx)


def maxpool2d_backward(dout, cache):
    x_shape, size, idx = cache
    batch, c, h, w = x_shape
    ho, wo = h // size, w // size
    dv = np.zeros((batch, c, ho, wo, size * size), dtype=dout.dtype)
    np.put_along_axis(dv, idx[..., None], dout[..., None], axis=-1)
    dx = dv.reshape(batch, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(batch, c, h, w)


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def linear_forward(x, w, b):
    if x.ndim != 2:
        raise ShapeError(f"linear expects 2D input, got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear weight {w.shape} incompatible with input {x.shape}")
    return x @ w.T + b, x


def linear_backward(dout, cache, w):
    x = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def flatten_forward(x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(dout, cache):
    return dout.reshape(cache)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels out of range [0, {num_classes})")
    p = softmax(logits)
    eps = np.finfo(logits.dtype).tiny
    loss = -np.log(p[np.arange(n), labels] + eps).mean()
    dlogits = p
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits
