"""Region (IoU) and boundary (Boundary-IoU) segmentation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage


@dataclass
class EvalRow:
    experiment: str
    train_area: str
    test_area: str
    model: str
    stage: str
    operator: str
    loss: str
    miou: float
    mboundary_iou: float
    n_samples: int
    boundary_d: int

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_csv_row(self) -> list[str]:
        out = []
        for k, v in asdict(self).items():
            out.append(repr(float(v)) if isinstance(v, float) else str(v))
        return out


def binarize(prob, tau: float = 0.5) -> np.ndarray:
    """1 where prob >= tau."""
    return (np.asarray(prob) >= tau).astype(np.uint8)


def _check_pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def iou(pred, gt) -> float:
    """TP / (TP + FP + FN). Two empty masks score 1.0."""
    pred, gt = _check_pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def disk(d: int) -> np.ndarray:
    """Boolean Euclidean disk of radius d: offsets with dy^2 + dx^2 <= d^2."""
    r = np.arange(-d, d + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= d * d


def boundary_band(mask, d: int) -> np.ndarray:
    """Mask pixels within Euclidean distance d of the background.

    Computed as the mask minus its erosion by a radius-d disk; pixels
    outside the image count as background.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros_like(m)
    eroded = ndimage.binary_erosion(m, structure=disk(int(d)), border_value=0)
    return m & ~eroded


def boundary_iou(pred, gt, d: int) -> float:
    pred, gt = _check_pair(pred, gt)
    return iou(boundary_band(pred, d), boundary_band(gt, d))


def default_boundary_d(height: int, width: int, ratio: float = 0.02) -> int:
    return max(1, int(math.floor(ratio * math.hypot(height, width) + 0.5)))


def mean_metric(values) -> float:
    vals = list(values)
    if not vals:
        raise ValueError("mean of an empty list")
    return math.fsum(vals) / len(vals)
