"""GPS point tables to frequency rasters, road vectors to buffered label rasters."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .grid import RasterGrid, world_to_pixel

# Buffer radius in meters per OSM fclass; anything unlisted falls in the 6 m bucket.
WIDE_CLASSES = frozenset({"motorway", "primary", "secondary"})
NARROW_CLASSES = frozenset(
    {"footway", "track", "service", "steps", "bridleway"}
    | {f"track_grade{i}" for i in range(1, 6)}
)
WIDE_BUFFER = 10.0
NARROW_BUFFER = 4.0
DEFAULT_BUFFER = 6.0

_CHUNK = 65536


class IngestError(ValueError):
    """Unparseable input record."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class GpsPoint:
    traj_id: str
    t: float
    x: float
    y: float


@dataclass(frozen=True)
class RoadSegment:
    vertices: tuple[tuple[float, float], ...]
    fclass: str

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 2:
            raise ValueError("a road segment needs at least two vertices")
        for (x0, y0), (x1, y1) in zip(verts, verts[1:]):
            if abs(x1 - x0) <= 1e-9 and abs(y1 - y0) <= 1e-9:
                raise ValueError("consecutive vertices coincide")
        object.__setattr__(self, "vertices", verts)


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    origin_x: float
    origin_y: float
    pixel_size: float = 2.5

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or not self.pixel_size > 0:
            raise ValueError("GridSpec needs positive width, height and pixel_size")

    @classmethod
    def from_json(cls, path) -> "GridSpec":
        d = json.loads(Path(path).read_text())
        return cls(int(d["width"]), int(d["height"]), float(d["origin_x"]),
                   float(d["origin_y"]), float(d.get("pixel_size", 2.5)))

    @classmethod
    def of(cls, grid: RasterGrid) -> "GridSpec":
        return cls(grid.width, grid.height, grid.origin_x, grid.origin_y, grid.pixel_size)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "origin_x": self.origin_x,
                "origin_y": self.origin_y, "pixel_size": self.pixel_size}

    def empty(self, nodata: float = -9999.0) -> RasterGrid:
        return RasterGrid(self.width, self.height, self.origin_x, self.origin_y,
                          self.pixel_size, nodata, np.zeros(self.width * self.height, np.float32))

    def cell_centers(self):
        xs = self.origin_x + (np.arange(self.width) + 0.5) * self.pixel_size
        ys = self.origin_y - (np.arange(self.height) + 0.5) * self.pixel_size
        return xs, ys


# --------------------------------------------------------------------------- GPS


def read_gps_csv(path, skip_bad: bool = False, stats: dict | None = None) -> Iterator[GpsPoint]:
    """Stream points from a ``traj_id,t,x,y`` CSV.

    Bad rows raise IngestError with the line number unless ``skip_bad``;
    skipped rows are tallied in ``stats["bad"]`` when a dict is passed.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["traj_id", "t", "x", "y"]:
            raise IngestError(f"expected header traj_id,t,x,y, got {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != 4:
                    raise ValueError(f"expected 4 fields, got {len(row)}")
                t, x, y = float(row[1]), float(row[2]), float(row[3])
                if not (np.isfinite(x) and np.isfinite(y)) or not t >= 0:
                    raise ValueError("non-finite coordinate or negative time")
            except ValueError as exc:
                if skip_bad:
                    if stats is not None:
                        stats["bad"] = stats.get("bad", 0) + 1
                    continue
                raise IngestError(str(exc), line=lineno) from None
            yield GpsPoint(row[0], t, x, y)


def _chunks(points: Iterable) -> Iterator[np.ndarray]:
    buf_x, buf_y = [], []
    for p in points:
        if isinstance(p, GpsPoint):
            buf_x.append(p.x)
            buf_y.append(p.y)
        else:
            buf_x.append(p[0])
            buf_y.append(p[1])
        if len(buf_x) >= _CHUNK:
            yield np.array(buf_x), np.array(buf_y)
            buf_x, buf_y = [], []
    if buf_x:
        yield np.array(buf_x), np.array(buf_y)


def rasterize_gps(points: Iterable, spec: GridSpec) -> tuple[RasterGrid, int]:
    """Per-cell point counts. Returns the count grid and the number of
    points that fell outside the extent.

    ``points`` may be GpsPoint objects or (x, y) pairs; it is consumed in
    fixed-size chunks so memory stays bounded by the output grid.
    """
    grid = spec.empty()
    counts = np.zeros(spec.width * spec.height, dtype=np.int64)
    skipped = 0
    for xs, ys in _chunks(points):
        col, row = world_to_pixel(grid, xs, ys)
        inside = (col >= 0) & (col < spec.width) & (row >= 0) & (row < spec.height)
        skipped += int((~inside).sum())
        flat = row[inside] * spec.width + col[inside]
        counts += np.bincount(flat, minlength=counts.size)
    return grid.with_data(counts.astype(np.float32)), skipped


def normalize_gps(grid: RasterGrid, clip_pct: float = 99.0) -> RasterGrid:
    """Scale counts to [0, 1] by the ``clip_pct`` percentile of the nonzero cells.

    Using nonzero cells keeps the clip meaningful on sparse rasters where most
    cells carry no traffic.
    """
    if not 0 < clip_pct <= 100:
        raise ValueError(f"clip_pct must be in (0, 100], got {clip_pct}")
    vals = np.where(grid.valid, grid.data, 0.0).astype(np.float64)
    if (vals < 0).any():
        raise ValueError("GPS frequency grid has negative values")
    positive = vals[vals > 0]
    if positive.size == 0:
        return grid.with_data(np.where(grid.valid, 0.0, grid.data).astype(np.float32))
    p = float(np.percentile(positive, clip_pct))
    out = np.minimum(vals, p) / p
    return grid.with_data(np.where(grid.valid, out, grid.data).astype(np.float32))


# --------------------------------------------------------------------------- roads


def buffer_width_for_class(fclass: str) -> float:
    """Buffer radius (m) for an OSM road class."""
    if fclass in WIDE_CLASSES:
        return WIDE_BUFFER
    if fclass in NARROW_CLASSES:
        return NARROW_BUFFER
    return DEFAULT_BUFFER


_WKT_RE = re.compile(r"^\s*LINESTRING\s*\((.*)\)\s*$", re.IGNORECASE)


def parse_linestring(wkt: str) -> tuple[tuple[float, float], ...]:
    m = _WKT_RE.match(wkt)
    if not m:
        raise ValueError(f"not a LINESTRING: {wkt[:40]!r}")
    verts = []
    for pair in m.group(1).split(","):
        parts = pair.split()
        if len(parts) != 2:
            raise ValueError(f"bad vertex {pair.strip()!r}")
        verts.append((float(parts[0]), float(parts[1])))
    return tuple(verts)


def format_linestring(vertices) -> str:
    return "LINESTRING (" + ", ".join(f"{x!r} {y!r}" for x, y in vertices) + ")"


def read_roads_csv(path) -> list[RoadSegment]:
    segments = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["fclass", "wkt"]:
            raise IngestError(f"expected header fclass,wkt, got {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != 2:
                    raise ValueError(f"expected 2 fields, got {len(row)}")
                segments.append(RoadSegment(parse_linestring(row[1]), row[0].strip()))
            except ValueError as exc:
                raise IngestError(str(exc), line=lineno) from None
    return segments


def write_roads_csv(segments: Iterable[RoadSegment], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fclass", "wkt"])
        for s in segments:
            w.writerow([s.fclass, format_linestring(s.vertices)])


def _burn_segment(mask, xs, ys, p0, p1, radius, spec):
    """Set cells whose center lies within ``radius`` of segment p0-p1."""
    ps = spec.pixel_size
    x0, y0 = p0
    x1, y1 = p1
    # bounding box inflated by the radius, in cell indices
    c_lo = int(np.floor((min(x0, x1) - radius - spec.origin_x) / ps)) - 1
    c_hi = int(np.ceil((max(x0, x1) + radius - spec.origin_x) / ps)) + 1
    r_lo = int(np.floor((spec.origin_y - max(y0, y1) - radius) / ps)) - 1
    r_hi = int(np.ceil((spec.origin_y - min(y0, y1) + radius) / ps)) + 1
    c_lo, c_hi = max(c_lo, 0), min(c_hi, spec.width)
    r_lo, r_hi = max(r_lo, 0), min(r_hi, spec.height)
    if c_lo >= c_hi or r_lo >= r_hi:
        return
    px = xs[c_lo:c_hi][None, :]
    py = ys[r_lo:r_hi][:, None]
    d2 = point_segment_dist2(px, py, x0, y0, x1, y1)
    mask[r_lo:r_hi, c_lo:c_hi] |= d2 <= radius * radius


def point_segment_dist2(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    t = ((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy)
    t = np.clip(t, 0.0, 1.0)
    ex = px - (x0 + t * dx)
    ey = py - (y0 + t * dy)
    return ex * ex + ey * ey


def rasterize_labels(segments: Iterable[RoadSegment], spec: GridSpec,
                     width_fn=buffer_width_for_class) -> RasterGrid:
    """Binary road mask: a cell is 1 when its center is within its class's
    buffer radius of any segment of that class."""
    xs, ys = spec.cell_centers()
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    for seg in segments:
        radius = float(width_fn(seg.fclass))
        for p0, p1 in zip(seg.vertices, seg.vertices[1:]):
            _burn_segment(mask, xs, ys, p0, p1, radius, spec)
    return spec.empty().with_data(mask.astype(np.float32))
