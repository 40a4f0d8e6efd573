"""Desk-scale synthetic areas: random road polylines, a satellite-like stack and GPS counts."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grid import GridStack, RasterGrid, write_grd, write_stack
from .ingest import GridSpec, RoadSegment, normalize_gps, rasterize_labels, write_roads_csv
from .patches import rotation_pad

BAND_NAMES = ("red", "green", "blue", "nir")
BAND_BASE = (0.25, 0.3, 0.2, 0.45)
BAND_GAIN = (0.55, 0.45, 0.5, -0.3)
ROAD_CLASSES = ("motorway", "primary", "residential", "tertiary", "service", "footway")
SENTINEL_FACTOR = 4


@dataclass
class SynthArea:
    directory: Path
    spec: GridSpec
    satellite: GridStack
    gps: RasterGrid
    labels: RasterGrid
    segments: list

    def sources(self) -> dict:
        """Manifest-style source paths, relative to ``directory``."""
        return {"satellite": "satellite", "gps": "gps.grd", "labels": "labels.grd"}


def _grid_shape(n: int) -> tuple[int, int]:
    rows = max(r for r in range(1, int(math.isqrt(n)) + 1) if n % r == 0)
    return n // rows, rows


def synth_extent(n_base_patches: int, size: int, overlap: float = 0.2,
                 pixel_size: float = 2.5) -> GridSpec:
    """Extent that holds exactly ``n_base_patches`` windows inside the rotation margin."""
    cols, rows = _grid_shape(n_base_patches)
    stride = max(1, int(math.floor(size * (1 - overlap) + 0.5)))
    pad = rotation_pad(size)
    width = 2 * pad + stride * (cols - 1) + size
    height = 2 * pad + stride * (rows - 1) + size
    return GridSpec(width, height, 0.0, height * pixel_size, pixel_size)


def _random_roads(rng, spec: GridSpec, n_roads: int) -> list[RoadSegment]:
    w_m = spec.width * spec.pixel_size
    h_m = spec.height * spec.pixel_size
    x0, y_top = spec.origin_x, spec.origin_y

    def edge_point(edge):
        t = rng.uniform(0.05, 0.95)
        if edge == 0:
            return x0 + t * w_m, y_top
        if edge == 1:
            return x0 + w_m, y_top - t * h_m
        if edge == 2:
            return x0 + t * w_m, y_top - h_m
        return x0, y_top - t * h_m

    roads = []
    for _ in range(n_roads):
        e0 = int(rng.integers(4))
        e1 = (e0 + int(rng.integers(1, 4))) % 4
        a = np.array(edge_point(e0))
        b = np.array(edge_point(e1))
        n_mid = int(rng.integers(1, 4))
        direction = b - a
        normal = np.array([-direction[1], direction[0]]) / (np.linalg.norm(direction) + 1e-12)
        ts = np.sort(rng.uniform(0.15, 0.85, size=n_mid))
        jitter = rng.normal(0.0, 0.06 * np.linalg.norm(direction), size=n_mid)
        mids = [a + t * direction + j * normal for t, j in zip(ts, jitter)]
        verts = [tuple(a)] + [tuple(m) for m in mids] + [tuple(b)]
        fclass = ROAD_CLASSES[int(rng.integers(len(ROAD_CLASSES)))]
        roads.append(RoadSegment(tuple(verts), fclass))
    return roads


def _box_blur(mask: np.ndarray, passes: int = 2) -> np.ndarray:
    out = mask.astype(np.float64)
    for _ in range(passes):
        out = ndimage.uniform_filter(out, size=3, mode="nearest")
    return out


def make_area(seed: int, n_base_patches: int = 32, size: int = 64, overlap: float = 0.2,
              noise_sigma: float = 0.1, hidden_frac: float = 0.0, roads_per_span: float = 0.6,
              pixel_size: float = 2.5, gps_lambda: float = 3.0, gps_dropout: float = 0.1):
    """Generate an area in memory.

    ``hidden_frac`` is the fraction of roads left out of the satellite bands
    (still labelled and still carrying GPS traffic), which makes the GPS
    raster informative beyond the imagery.
    """
    rng = np.random.default_rng(seed)
    spec = synth_extent(n_base_patches, size, overlap, pixel_size)
    n_roads = max(2, int(round((spec.width + spec.height) / size * roads_per_span)))
    roads = _random_roads(rng, spec, n_roads)
    hidden = rng.random(len(roads)) < hidden_frac
    labels = rasterize_labels(roads, spec)
    visible = rasterize_labels([r for r, h in zip(roads, hidden) if not h], spec)

    blurred = _box_blur(visible.data)
    bands = []
    for base, gain in zip(BAND_BASE, BAND_GAIN):
        noise = rng.normal(0.0, noise_sigma, size=blurred.shape) if noise_sigma > 0 else 0.0
        vals = np.clip(base + gain * blurred + noise, 0.0, 1.0)
        bands.append(labels.with_data(vals.astype(np.float32)))
    satellite = GridStack(tuple(bands), BAND_NAMES)

    road = labels.data > 0
    counts = np.where(road, rng.poisson(gps_lambda, size=road.shape), 0)
    counts = np.where(rng.random(road.shape) < gps_dropout, 0, counts)
    gps_counts = labels.with_data(counts.astype(np.float32))
    return spec, roads, satellite, gps_counts, labels


def _write_gps_points(counts: RasterGrid, path, rng) -> int:
    """Emit one CSV point per count, placed strictly inside its cell."""
    ps = counts.pixel_size
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "t", "x", "y"])
        rows, cols = np.nonzero(counts.data > 0)
        for r, c in zip(rows, cols):
            k = int(counts.data[r, c])
            u = rng.uniform(0.05, 0.95, size=(k, 2))
            for j in range(k):
                x = counts.origin_x + (c + u[j, 0]) * ps
                y = counts.origin_y - (r + u[j, 1]) * ps
                w.writerow([f"t{n % 97}", n, repr(float(x)), repr(float(y))])
                n += 1
    return n


def _sentinel_bands(satellite: GridStack, factor: int) -> GridStack:
    """Block-mean the 2.5 m bands down to the coarse sensor grid (edge-replicated to a multiple of factor)."""
    out = []
    for g in satellite.grids:
        h = -(-g.height // factor) * factor
        w = -(-g.width // factor) * factor
        a = np.pad(g.data, ((0, h - g.height), (0, w - g.width)), mode="edge").astype(np.float64)
        coarse = a.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
        out.append(RasterGrid(w // factor, h // factor, g.origin_x, g.origin_y,
                              g.pixel_size * factor, g.nodata, coarse.astype(np.float32)))
    return GridStack(tuple(out), satellite.band_names)


def synth_dataset(out_dir, seed: int = 0, n_base_patches: int = 32, size: int = 64,
                  write_raw: bool = True, **kwargs) -> SynthArea:
    """Write a synthetic area to ``out_dir``.

    Prepared sources: ``satellite/`` (4-band stack), ``gps.grd`` (normalized),
    ``labels.grd``, ``spec.json``. With ``write_raw``, also the raw inputs the
    ingest stages consume: ``raw/roads.csv``, ``raw/gps.csv`` and the coarse
    ``raw/sentinel/`` stack at 4x the pixel size.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec, roads, satellite, gps_counts, labels = make_area(seed, n_base_patches, size, **kwargs)
    gps = normalize_gps(gps_counts, 99.0)
    write_stack(satellite, out / "satellite")
    write_grd(gps, out / "gps.grd")
    write_grd(labels, out / "labels.grd")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    if write_raw:
        raw = out / "raw"
        raw.mkdir(exist_ok=True)
        write_roads_csv(roads, raw / "roads.csv")
        _write_gps_points(gps_counts, raw / "gps.csv", np.random.default_rng([seed, 1]))
        write_stack(_sentinel_bands(satellite, SENTINEL_FACTOR), raw / "sentinel")
    return SynthArea(out, spec, satellite, gps, labels, roads)
