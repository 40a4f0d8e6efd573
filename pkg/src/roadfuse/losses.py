"""MSE, binary cross-entropy and focal loss with analytic gradients.

All losses are means over every element and return the gradient with
respect to the prediction, ready to seed ``Graph.backward``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class LossValue:
    value: float
    grad: np.ndarray


def _prep(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {gt.shape}")
    return pred.astype(np.float64), gt.astype(np.float64), pred.dtype


def mse(pred, gt) -> LossValue:
    p, y, dtype = _prep(pred, gt)
    diff = p - y
    n = diff.size
    return LossValue(float(np.mean(diff * diff)), (2.0 * diff / n).astype(dtype))


def bce(pred, gt, clamp_eps: float = CLAMP_EPS) -> LossValue:
    p, y, dtype = _prep(pred, gt)
    n = p.size
    pc = np.clip(p, clamp_eps, 1.0 - clamp_eps)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    grad = (pc - y) / (pc * (1.0 - pc)) / n
    # the clamp is flat outside its range
    grad = np.where((p < clamp_eps) | (p > 1.0 - clamp_eps), 0.0, grad)
    return LossValue(float(loss.mean()), grad.astype(dtype))


def focal(pred, gt, gamma: float = 2.0, alpha: float | None = 0.25,
          clamp_eps: float = CLAMP_EPS) -> LossValue:
    """Mean of -alpha_t (1 - p_t)^gamma log p_t.

    ``alpha=None`` disables class weighting (alpha_t = 1).
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if alpha is not None and not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    p, y, dtype = _prep(pred, gt)
    n = p.size
    pc = np.clip(p, clamp_eps, 1.0 - clamp_eps)
    pos = y >= 0.5
    pt = np.where(pos, pc, 1.0 - pc)
    at = 1.0 if alpha is None else np.where(pos, alpha, 1.0 - alpha)
    log_pt = np.log(pt)
    mod = (1.0 - pt) ** gamma
    loss = -at * mod * log_pt
    # d loss / d p_t
    dpt = -at * mod / pt
    if gamma != 0:
        dpt = dpt + at * gamma * (1.0 - pt) ** (gamma - 1.0) * log_pt
    grad = np.where(pos, dpt, -dpt) / n
    grad = np.where((p < clamp_eps) | (p > 1.0 - clamp_eps), 0.0, grad)
    return LossValue(float(loss.mean()), grad.astype(dtype))


LOSSES = {"mse": mse, "bce": bce, "focal": focal}


def get_loss(name: str):
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; expected one of {sorted(LOSSES)}") from None
