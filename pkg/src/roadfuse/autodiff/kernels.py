"""Forward/backward numpy kernels for the layer set.

Arrays are N x C x H x W. Backward functions take the upstream gradient
first, followed by whatever the forward pass cached.
"""

from __future__ import annotations

import numpy as np


def conv_out_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _window(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv2d_forward(x, w, b, stride=1, padding=0, dilation=1):
    """Cross-correlation. w is O x C x k x k. Returns (y, cols)."""
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {cw}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
    ho = conv_out_size(h, kh, stride, padding, dilation)
    wo = conv_out_size(wd, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        rs = _window(i * dilation, ho, stride)
        for j in range(kw):
            cs = _window(j * dilation, wo, stride)
            cols[:, i, j] = xp[:, :, rs, cs].transpose(1, 0, 2, 3)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    y = w.reshape(o, -1) @ cols
    y = y.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        y = y + b.reshape(1, o, 1, 1)
    return np.ascontiguousarray(y), cols


def conv2d_backward(gy, x_shape, w, cols, stride=1, padding=0, dilation=1):
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    ho, wo = gy.shape[2:]
    gy2 = gy.transpose(1, 0, 2, 3).reshape(o, -1)
    gw = (gy2 @ cols.T).reshape(w.shape)
    gb = gy.sum(axis=(0, 2, 3))
    gcols = (w.reshape(o, -1).T @ gy2).reshape(c, kh, kw, n, ho, wo)
    gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=gy.dtype)
    for i in range(kh):
        rs = _window(i * dilation, ho, stride)
        for j in range(kw):
            cs = _window(j * dilation, wo, stride)
            gxp[:, :, rs, cs] += gcols[:, i, j].transpose(1, 0, 2, 3)
    gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
    return np.ascontiguousarray(gx), gw, gb


def conv_transpose2d_forward(x, w, b, stride=1, padding=0):
    """Transposed convolution; w is C_in x C_out x k x k (the adjoint of conv2d)."""
    n, c, h, wd = x.shape
    ci, co, kh, kw = w.shape
    if c != ci:
        raise ValueError(f"conv_transpose2d: input has {c} channels, kernel expects {ci}")
    if b is not None and b.shape != (co,):
        raise ValueError(f"conv_transpose2d: bias shape {b.shape} does not match {co}")
    hf, wf = (h - 1) * stride + kh, (wd - 1) * stride + kw
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise ValueError("conv_transpose2d: padding removes the whole output")
    xm = x.transpose(1, 0, 2, 3).reshape(c, -1)
    cols = (w.reshape(c, -1).T @ xm).reshape(co, kh, kw, n, h, wd)
    yf = np.zeros((n, co, hf, wf), dtype=x.dtype)
    for i in range(kh):
        rs = _window(i, h, stride)
        for j in range(kw):
            cs = _window(j, wd, stride)
            yf[:, :, rs, cs] += cols[:, i, j].transpose(1, 0, 2, 3)
    y = yf[:, :, padding : hf - padding, padding : wf - padding]
    if b is not None:
        y = y + b.reshape(1, co, 1, 1)
    return np.ascontiguousarray(y), xm


def conv_transpose2d_backward(gy, x_shape, w, xm, stride=1, padding=0):
    n, c, h, wd = x_shape
    ci, co, kh, kw = w.shape
    if padding:
        gy = np.pad(gy, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    gcols = np.empty((co, kh, kw, n, h, wd), dtype=gy.dtype)
    for i in range(kh):
        rs = _window(i, h, stride)
        for j in range(kw):
            cs = _window(j, wd, stride)
            gcols[:, i, j] = gy[:, :, rs, cs].transpose(1, 0, 2, 3)
    gcols = gcols.reshape(co * kh * kw, -1)
    gx = (w.reshape(c, -1) @ gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
    gw = (xm @ gcols.T).reshape(w.shape)
    gb = gy.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(gx), gw, gb


def maxpool2_forward(x):
    """2x2/stride-2 max pool. Ties go to the first element in row-major window order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(gy, idx):
    n, c, h2, w2 = gy.shape
    g = np.zeros((n, c, h2, w2, 4), dtype=gy.dtype)
    np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
    g = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
    return g


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def batchnorm_train_forward(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    y = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return y, xhat, inv_std, mean, var


def batchnorm_train_backward(gy, xhat, inv_std, gamma):
    m = gy.shape[0] * gy.shape[2] * gy.shape[3]
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    dxhat = gy * gamma.reshape(1, -1, 1, 1)
    gx = (inv_std.reshape(1, -1, 1, 1) / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    )
    return gx, ggamma, gbeta
