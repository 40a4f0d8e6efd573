"""Per-patch texture complexity: gray-level entropy and GLCM homogeneity."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .patches import extract_rotated_patch

GLCM_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))  # (d_row, d_col)


@dataclass(frozen=True)
class ComplexityRow:
    patch_id: int
    area: str
    entropy: float
    homogeneity: float


def quantize(patch, levels: int) -> np.ndarray:
    """Map values in [0, 1] onto ``levels`` equal-width bins."""
    p = np.clip(np.asarray(patch, dtype=np.float64), 0.0, 1.0)
    return np.minimum((p * levels).astype(np.int64), levels - 1)


def shannon_entropy(patch, levels: int = 256) -> float:
    """Entropy in bits of the quantized gray-level histogram."""
    q = quantize(patch, levels)
    if q.size == 0:
        raise ValueError("entropy of an empty patch")
    counts = np.bincount(q.ravel(), minlength=levels)
    p = counts[counts > 0] / q.size
    return float(max(0.0, -np.sum(p * np.log2(p))))


def glcm(patch, levels: int = 64, offsets=GLCM_OFFSETS, quantized: bool = False) -> np.ndarray:
    """Symmetric gray-level co-occurrence matrix summed over ``offsets``, normalized to 1.

    Raises ValueError when no pixel pair exists for any offset.
    """
    q = np.asarray(patch) if quantized else quantize(patch, levels)
    if q.ndim != 2:
        raise ValueError("glcm expects a 2-D patch")
    h, w = q.shape
    counts = np.zeros(levels * levels, dtype=np.int64)
    for dr, dc in offsets:
        r0, r1 = max(0, -dr), min(h, h - dr)
        c0, c1 = max(0, -dc), min(w, w - dc)
        if r1 <= r0 or c1 <= c0:
            continue
        a = q[r0:r1, c0:c1].ravel()
        b = q[r0 + dr : r1 + dr, c0 + dc : c1 + dc].ravel()
        counts += np.bincount(a * levels + b, minlength=levels * levels)
        counts += np.bincount(b * levels + a, minlength=levels * levels)
    total = counts.sum()
    if total == 0:
        raise ValueError(f"patch {h}x{w} has no pixel pairs for the given offsets")
    return (counts / total).reshape(levels, levels)


def homogeneity(matrix) -> float:
    """Sum of P(i, j) / (1 + |i - j|)."""
    m = np.asarray(matrix, dtype=np.float64)
    if abs(m.sum() - 1.0) > 1e-6:
        raise ValueError(f"GLCM must be normalized (sum = {m.sum()})")
    i, j = np.indices(m.shape)
    return float(np.sum(m / (1.0 + np.abs(i - j))))


def grayscale(patch_bands: np.ndarray, rgb=(0, 1, 2)) -> np.ndarray:
    return np.mean(patch_bands[list(rgb)], axis=0)


def patch_complexity(gray, entropy_levels=256, glcm_levels=64) -> tuple[float, float]:
    return shannon_entropy(gray, entropy_levels), homogeneity(glcm(gray, glcm_levels))


def area_report(manifests, rgb=(0, 1, 2), entropy_levels=256, glcm_levels=64,
                base_only: bool = False):
    """Complexity rows for every record of each manifest plus per-area (mean, variance).

    Grayscale is the unweighted mean of the ``rgb`` satellite bands.
    Variance is the population variance of the emitted rows.
    """
    if not isinstance(manifests, (list, tuple)):
        manifests = [manifests]
    rows: list[ComplexityRow] = []
    for man in manifests:
        src = man.load_sources()
        if len(src.satellite.grids) <= max(rgb):
            raise ValueError(f"satellite stack has {len(src.satellite.grids)} bands; need bands {rgb}")
        for rec in man.records:
            if base_only and rec.angle != 0:
                continue
            bands = extract_rotated_patch(src.satellite, rec, "bilinear", nearest_bands=())
            e, h = patch_complexity(grayscale(bands, rgb), entropy_levels, glcm_levels)
            rows.append(ComplexityRow(rec.patch_id, rec.area, e, h))
    return rows, summarize(rows)


def summarize(rows) -> dict:
    out: dict = {}
    for area in sorted({r.area for r in rows}):
        e = [r.entropy for r in rows if r.area == area]
        h = [r.homogeneity for r in rows if r.area == area]
        out[area] = {
            "n": len(e),
            "entropy_mean": math.fsum(e) / len(e),
            "entropy_var": float(np.var(e)),
            "homogeneity_mean": math.fsum(h) / len(h),
            "homogeneity_var": float(np.var(h)),
        }
    return out


def histogram_table(rows, bins: int = 20, entropy_max: float = 8.0) -> list[dict]:
    """Per-area histogram counts for entropy in [0, entropy_max] and homogeneity in [0, 1]."""
    table = []
    areas = sorted({r.area for r in rows})
    for metric, hi in (("entropy", entropy_max), ("homogeneity", 1.0)):
        edges = np.linspace(0.0, hi, bins + 1)
        for area in areas:
            vals = [getattr(r, metric) for r in rows if r.area == area]
            counts, _ = np.histogram(vals, bins=edges)
            for k in range(bins):
                table.append({"metric": metric, "area": area, "bin_lo": float(edges[k]),
                              "bin_hi": float(edges[k + 1]), "count": int(counts[k])})
    return table


def write_report(rows, summary, out_csv, summary_json=None, histogram_csv=None) -> None:
    out_csv = Path(out_csv)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "area", "entropy", "homogeneity"])
        for r in rows:
            w.writerow([r.patch_id, r.area, repr(r.entropy), repr(r.homogeneity)])
    summary_json = Path(summary_json) if summary_json else out_csv.with_name("summary.json")
    summary_json.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    histogram_csv = Path(histogram_csv) if histogram_csv else out_csv.with_name("histogram.csv")
    table = histogram_table(rows)
    with open(histogram_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["metric", "area", "bin_lo", "bin_hi", "count"])
        w.writeheader()
        w.writerows(table)
