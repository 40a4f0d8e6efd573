"""Tape-based reverse mode.

A :class:`Graph` records every op applied through it; :meth:`Graph.backward`
replays the tape in exact reverse order and accumulates gradients on the
tensors that require them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels as K


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class Param(Tensor):
    """Named trainable array. Its grad is zero-initialized and never None."""

    __slots__ = ("name", "frozen")

    def __init__(self, name: str, value, frozen: bool = False):
        super().__init__(value, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def freeze(self, frozen: bool = True):
        self.frozen = frozen
        self.requires_grad = not frozen

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Operation tape. ``Graph(record=False)`` runs forward only."""

    def __init__(self, record: bool = True):
        self.record = record
        self.tape: list[_Node] = []

    def _emit(self, data, inputs, backward) -> Tensor:
        needs = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(data, requires_grad=needs)
        if needs:
            self.tape.append(_Node(out, tuple(inputs), backward))
        return out

    def backward(self, out: Tensor, grad) -> None:
        grad = np.asarray(grad, dtype=out.data.dtype)
        if grad.shape != out.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != output shape {out.shape}")
        out.grad = grad
        for node in reversed(self.tape):
            if node.out.grad is None:
                continue
            grads = node.backward(node.out.grad)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = g.copy() if isinstance(t, Param) else g
                else:
                    t.grad = t.grad + g
            if not isinstance(node.out, Param):
                node.out.grad = None  # free intermediates as we go
        self.tape.clear()

    # ------------------------------------------------------------------ layers

    def conv2d(self, x, w, b=None, stride=1, padding=0, dilation=1):
        if padding == "same":
            if stride != 1:
                raise ValueError("'same' padding is only supported for stride 1")
            padding = dilation * (w.shape[-1] - 1) // 2
        x = _as_tensor(x)
        y, cols = K.conv2d_forward(x.data, w.data, None if b is None else b.data,
                                   stride, padding, dilation)
        x_shape = x.shape

        def back(g):
            gx, gw, gb = K.conv2d_backward(g, x_shape, w.data, cols, stride, padding, dilation)
            return (gx, gw) if b is None else (gx, gw, gb)

        inputs = (x, w) if b is None else (x, w, b)
        return self._emit(y, inputs, back)

    def conv_transpose2d(self, x, w, b=None, stride=1, padding=0):
        x = _as_tensor(x)
        y, xm = K.conv_transpose2d_forward(x.data, w.data, None if b is None else b.data,
                                           stride, padding)
        x_shape = x.shape

        def back(g):
            gx, gw, gb = K.conv_transpose2d_backward(g, x_shape, w.data, xm, stride, padding)
            return (gx, gw) if b is None else (gx, gw, gb)

        inputs = (x, w) if b is None else (x, w, b)
        return self._emit(y, inputs, back)

    def maxpool2(self, x):
        y, idx = K.maxpool2_forward(x.data)
        return self._emit(y, (x,), lambda g: (K.maxpool2_backward(g, idx),))

    def relu(self, x):
        mask = x.data > 0
        return self._emit(x.data * mask, (x,), lambda g: (g * mask,))

    def sigmoid(self, x):
        s = K.sigmoid(x.data)
        xd = x.data
        # s * sigmoid(-x) instead of s * (1 - s): 1 - s underflows to 0 in float32 for large x
        return self._emit(s, (x,), lambda g: (g * s * K.sigmoid(-xd),))

    def add(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return self._emit(a.data + b.data, (a, b), lambda g: (g, g))

    def add_n(self, *ts):
        out = ts[0]
        for t in ts[1:]:
            out = self.add(out, t)
        return out

    def mul(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        return self._emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))

    def scale(self, a, k: float):
        return self._emit(a.data * k, (a,), lambda g: (g * k,))

    def maximum(self, a, b):
        """Elementwise max; on ties the gradient goes to ``a``."""
        if a.shape != b.shape:
            raise ValueError(f"maximum: shape mismatch {a.shape} vs {b.shape}")
        win_a = a.data >= b.data
        return self._emit(np.where(win_a, a.data, b.data), (a, b),
                          lambda g: (g * win_a, g * ~win_a))

    def concat_channels(self, a, b):
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ValueError(f"concat: N,H,W mismatch {a.shape} vs {b.shape}")
        ca = a.shape[1]
        y = np.concatenate([a.data, b.data], axis=1)
        return self._emit(y, (a, b), lambda g: (g[:, :ca], g[:, ca:]))

    def batchnorm(self, x, gamma, beta, running_mean, running_var, train: bool,
                  eps: float = 1e-5, momentum: float = 0.9):
        """Per-channel batch normalization.

        In train mode the running statistics (plain arrays) are updated in place
        as ``momentum * running + (1 - momentum) * batch``.
        """
        c = x.shape[1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ValueError(f"batchnorm: affine params sized {gamma.shape}, input has {c} channels")
        gd = gamma.data
        if train:
            y, xhat, inv_std, mean, var = K.batchnorm_train_forward(x.data, gd, beta.data, eps)
            running_mean *= momentum
            running_mean += (1 - momentum) * mean.astype(running_mean.dtype)
            running_var *= momentum
            running_var += (1 - momentum) * var.astype(running_var.dtype)

            def back(g):
                return K.batchnorm_train_backward(g, xhat, inv_std, gd)
        else:
            inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
            xhat = (x.data - running_mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
            y = (xhat * gd.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)).astype(x.dtype)

            def back(g):
                return (g * (gd * inv_std).reshape(1, -1, 1, 1),
                        (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return self._emit(y, (x, gamma, beta), back)
