"""Central finite-difference certification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .graph import Graph, Param, Tensor


class NonFiniteError(FloatingPointError):
    pass


def grad_check(build: Callable[[Graph], Tensor], tensors: Sequence[Tensor], eps: float = 1e-3,
               seed: int = 0, max_per_tensor: int | None = None, floor: float = 1e-3,
               atol: float = 0.0) -> float:
    """Worst relative error between analytic and numeric gradients.

    ``build(graph)`` must compute the output from ``tensors`` (inputs and
    params, normally float64). The scalar probed is ``sum(out * R)`` for a
    fixed Gaussian ``R``. Per element the error is
    ``|a - n| / max(|a|, |n|, floor * max|a|)``: the floor keeps entries whose
    gradient is tiny relative to the rest of their tensor from dominating.
    Tensors with ``requires_grad=False`` are skipped. ``max_per_tensor``
    limits the number of probed entries per tensor (seeded random subset).
    Entries where both gradients are within ``atol`` of zero count as agreeing;
    this covers structurally zero gradients such as a bias feeding a
    train-mode batchnorm, where both sides are pure rounding noise.
    """
    rng = np.random.default_rng(seed)
    g = Graph()
    out = build(g)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("non-finite values in the forward output")
    proj = rng.standard_normal(out.shape)
    for t in tensors:
        if isinstance(t, Param):
            t.zero_grad()
        else:
            t.grad = None
    g.backward(out, proj)

    def probe() -> float:
        y = build(Graph(record=False)).data
        if not np.all(np.isfinite(y)):
            raise NonFiniteError("non-finite values while probing")
        return float(np.sum(y * proj))

    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else np.array(t.grad, dtype=np.float64)
        if not np.all(np.isfinite(analytic)):
            raise NonFiniteError(f"non-finite analytic gradient for {t!r}")
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)  # a view: perturbations write through
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
        scale = max(float(np.abs(analytic).max()), 1e-12)
        a_flat = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = probe()
            flat[i] = orig - eps
            down = probe()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = a_flat[i]
            if abs(a) <= atol and abs(num) <= atol:
                continue
            denom = max(abs(a), abs(num), floor * scale)
            worst = max(worst, abs(a - num) / denom)
    return worst
