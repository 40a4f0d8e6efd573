"""Georeferenced single-band rasters, the .grd file format, resampling and normalization."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRD_MAGIC = b"GRD1"
KEYS_A = -0.5


class GridFormatError(ValueError):
    """Raised when a .grd file is malformed."""


class DegenerateRangeWarning(UserWarning):
    """The clip range collapsed to a single value; output was set to zeros."""


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """North-up float32 raster. Row 0 is the north edge, origin is the top-left corner."""

    width: int
    height: int
    origin_x: float
    origin_y: float
    pixel_size: float
    nodata: float
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"grid dimensions must be positive, got {self.width}x{self.height}")
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.size != self.width * self.height:
            raise ValueError(
                f"data has {arr.size} values, expected {self.width * self.height}"
            )
        arr = arr.reshape(self.height, self.width)
        bad = ~np.isfinite(arr) & ~self._sentinel_mask(arr)
        if bad.any():
            raise ValueError("grid contains non-finite values that are not the nodata sentinel")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def _sentinel_mask(self, arr):
        if math.isnan(self.nodata):
            return np.isnan(arr)
        return arr == np.float32(self.nodata)

    @property
    def valid(self) -> np.ndarray:
        return ~self._sentinel_mask(self.data)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def geometry(self) -> tuple:
        return (self.width, self.height, self.origin_x, self.origin_y, self.pixel_size)

    def with_data(self, data, **changes) -> "RasterGrid":
        kw = dict(
            width=self.width,
            height=self.height,
            origin_x=self.origin_x,
            origin_y=self.origin_y,
            pixel_size=self.pixel_size,
            nodata=self.nodata,
        )
        kw.update(changes)
        return RasterGrid(data=data, **kw)

    def __eq__(self, other):
        if not isinstance(other, RasterGrid):
            return NotImplemented
        same_nodata = (self.nodata == other.nodata) or (
            math.isnan(self.nodata) and math.isnan(other.nodata)
        )
        return (
            self.geometry() == other.geometry()
            and same_nodata
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class GridStack:
    grids: tuple[RasterGrid, ...]
    band_names: tuple[str, ...]

    def __post_init__(self):
        grids = tuple(self.grids)
        names = tuple(self.band_names)
        if not grids:
            raise ValueError("a GridStack needs at least one band")
        if len(grids) != len(names):
            raise ValueError("band_names must match the number of grids")
        ref = grids[0].geometry()
        for name, g in zip(names, grids):
            if g.geometry() != ref:
                raise ValueError(f"band {name!r} is not aligned with band {names[0]!r}")
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "band_names", names)

    @property
    def geometry(self) -> tuple:
        return self.grids[0].geometry()

    def array(self) -> np.ndarray:
        """Bands stacked as a C x H x W float32 array."""
        return np.stack([g.data for g in self.grids])

    def __getitem__(self, name: str) -> RasterGrid:
        return self.grids[self.band_names.index(name)]


# --------------------------------------------------------------------------- I/O


def write_grd(grid: RasterGrid, path) -> None:
    header = "{} {} {} {} {} {}\n".format(
        grid.width,
        grid.height,
        repr(float(grid.origin_x)),
        repr(float(grid.origin_y)),
        repr(float(grid.pixel_size)),
        repr(float(grid.nodata)),
    )
    payload = grid.data.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(GRD_MAGIC + b"\n")
        fh.write(header.encode("ascii"))
        fh.write(payload)


def read_grd(path) -> RasterGrid:
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    if first < 0 or raw[:first] != GRD_MAGIC:
        raise GridFormatError(f"{path}: bad magic, expected {GRD_MAGIC!r}")
    second = raw.find(b"\n", first + 1)
    if second < 0:
        raise GridFormatError(f"{path}: truncated header")
    fields = raw[first + 1 : second].decode("ascii").split()
    if len(fields) != 6:
        raise GridFormatError(f"{path}: header needs 6 fields, found {len(fields)}")
    try:
        width, height = int(fields[0]), int(fields[1])
        ox, oy, ps, nodata = (float(v) for v in fields[2:])
    except ValueError as exc:
        raise GridFormatError(f"{path}: unparseable header: {exc}") from None
    payload = raw[second + 1 :]
    expected = width * height * 4
    if len(payload) < expected:
        raise GridFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) != expected:
        raise GridFormatError(
            f"{path}: header/payload length mismatch ({len(payload)} bytes, header implies {expected})"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return RasterGrid(width, height, ox, oy, ps, nodata, data)


def write_stack(stack: GridStack, directory) -> Path:
    """Write each band as <name>.grd plus a stack.json manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for name, g in zip(stack.band_names, stack.grids):
        fname = f"{name}.grd"
        write_grd(g, directory / fname)
        files.append(fname)
    manifest = directory / "stack.json"
    manifest.write_text(
        json.dumps({"band_names": list(stack.band_names), "files": files}, indent=2) + "\n"
    )
    return manifest


def read_stack(path) -> GridStack:
    path = Path(path)
    manifest = path / "stack.json" if path.is_dir() else path
    meta = json.loads(manifest.read_text())
    grids = [read_grd(manifest.parent / f) for f in meta["files"]]
    return GridStack(tuple(grids), tuple(meta["band_names"]))


def write_pgm(grid: RasterGrid, path) -> None:
    """8-bit P5 preview; values in [0,1] map linearly to 0..255, nodata to 0."""
    vals = np.where(grid.valid, grid.data, 0.0)
    img = np.clip(np.rint(np.clip(vals, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


# --------------------------------------------------------------------------- geometry


def world_to_pixel(grid, x, y):
    """Cell (col, row) containing the point; works on scalars or arrays.

    Membership is half-open on the offsets from the top-left corner:
    col c iff c*ps <= x - origin_x < (c+1)*ps, and likewise for the row with
    origin_y - y. Points on a shared edge go to the higher index.
    Out-of-extent points give out-of-range indices.
    """
    ps = float(grid.pixel_size)
    col = _half_open_index(np.asarray(x, dtype=np.float64) - grid.origin_x, ps)
    row = _half_open_index(grid.origin_y - np.asarray(y, dtype=np.float64), ps)
    if col.ndim == 0:
        return int(col), int(row)
    return col, row


def _half_open_index(offset: np.ndarray, ps: float) -> np.ndarray:
    idx = np.floor(offset / ps)
    # Division rounding can put idx one off the inequality definition; repair it.
    idx = np.where(idx * ps > offset, idx - 1, idx)
    idx = np.where((idx + 1) * ps <= offset, idx + 1, idx)
    return idx.astype(np.int64)


def pixel_to_world(grid, col, row):
    """World coordinates of the cell center."""
    x = grid.origin_x + (np.asarray(col, dtype=np.float64) + 0.5) * grid.pixel_size
    y = grid.origin_y - (np.asarray(row, dtype=np.float64) + 0.5) * grid.pixel_size
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


# --------------------------------------------------------------------------- resampling


def keys_kernel(s, a: float = KEYS_A):
    s = np.abs(np.asarray(s, dtype=np.float64))
    s2, s3 = s * s, s * s * s
    near = (a + 2) * s3 - (a + 3) * s2 + 1
    far = a * s3 - 5 * a * s2 + 8 * a * s - 4 * a
    return np.where(s <= 1, near, np.where(s < 2, far, 0.0))


def _keys_extend(values: np.ndarray, axis: int) -> np.ndarray:
    """Pad two samples on each side with the cubic-convolution boundary rule
    f[-1] = 3 f[0] - 3 f[1] + f[2], which keeps quadratics exact."""
    v = np.moveaxis(values, axis, 0)
    lo1 = 3 * v[0] - 3 * v[1] + v[2]
    lo2 = 3 * lo1 - 3 * v[0] + v[1]
    hi1 = 3 * v[-1] - 3 * v[-2] + v[-3]
    hi2 = 3 * hi1 - 3 * v[-1] + v[-2]
    out = np.concatenate([lo2[None], lo1[None], v, hi1[None], hi2[None]], axis=0)
    return np.moveaxis(out, 0, axis)


def _cubic_taps(n_in: int, factor: int, edge: str):
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(src).astype(np.int64)
    offsets = np.arange(-1, 3)
    idx = base[:, None] + offsets[None, :]
    weights = keys_kernel(src[:, None] - idx)
    if edge == "clamp":
        idx = np.clip(idx, 0, n_in - 1)
    else:
        idx = idx + 2  # into the padded axis
    return idx, weights


def _resample_axis(values, factor, axis, edge):
    n_in = values.shape[axis]
    idx, w = _cubic_taps(n_in, factor, edge)
    if edge != "clamp":
        values = _keys_extend(values, axis)
    v = np.moveaxis(values, axis, 0)
    out = np.zeros((idx.shape[0],) + v.shape[1:], dtype=np.float64)
    for k in range(4):
        wk = w[:, k].reshape((-1,) + (1,) * (v.ndim - 1))
        out += wk * v[idx[:, k]]
    return np.moveaxis(out, 0, axis)


def _invalid_reach(invalid, factor, axis, edge):
    """True where any nonzero-weight tap touches an invalid cell."""
    n_in = invalid.shape[axis]
    idx, w = _cubic_taps(n_in, factor, edge)
    if edge != "clamp":
        # extrapolated taps depend on the first/last three samples
        inv = np.moveaxis(invalid, axis, 0)
        lo = inv[:3].any(axis=0)
        hi = inv[-3:].any(axis=0)
        invalid = np.moveaxis(np.concatenate([lo[None], lo[None], inv, hi[None], hi[None]]), 0, axis)
    v = np.moveaxis(invalid, axis, 0)
    out = np.zeros((idx.shape[0],) + v.shape[1:], dtype=bool)
    for k in range(4):
        nz = (w[:, k] != 0).reshape((-1,) + (1,) * (v.ndim - 1))
        out |= nz & v[idx[:, k]]
    return np.moveaxis(out, 0, axis)


def upscale_cubic(grid: RasterGrid, factor: int, edge: str = "extrapolate") -> RasterGrid:
    """Keys cubic-convolution upscaling (a = -0.5) by an integer factor.

    Sample positions follow pixel-center alignment. ``edge="extrapolate"`` pads
    the border with the cubic-convolution boundary condition (exact for
    linear and quadratic fields); ``edge="clamp"`` repeats the edge sample.
    Output cells with a nodata cell among their taps are nodata.
    """
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor!r}")
    if edge not in ("extrapolate", "clamp"):
        raise ValueError(f"unknown edge mode {edge!r}")
    if grid.width < 4 or grid.height < 4 or grid.valid.sum() < 16:
        raise ValueError("grid too small for the 4-tap cubic kernel (need at least 4x4 valid pixels)")
    if factor == 1:
        return grid
    valid = grid.valid
    vals = np.where(valid, grid.data, 0.0).astype(np.float64)
    out = _resample_axis(_resample_axis(vals, factor, 1, edge), factor, 0, edge)
    invalid = ~valid
    if invalid.any():
        bad = _invalid_reach(_invalid_reach(invalid, factor, 1, edge), factor, 0, edge)
        out = np.where(bad, grid.nodata, out)
    return grid.with_data(
        out.astype(np.float32),
        width=grid.width * factor,
        height=grid.height * factor,
        pixel_size=grid.pixel_size / factor,
    )


# --------------------------------------------------------------------------- normalization


def normalize_minmax(grid: RasterGrid, lo_pct: float = 2.0, hi_pct: float = 98.0) -> RasterGrid:
    """Clip valid pixels to their [lo_pct, hi_pct] percentiles and map affinely to [0, 1].

    Percentiles use linear interpolation between order statistics.
    A collapsed range gives zeros and a DegenerateRangeWarning.
    """
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    valid = grid.valid
    if not valid.any():
        raise ValueError("cannot normalize an all-nodata grid")
    vals = grid.data[valid].astype(np.float64)
    p_lo, p_hi = np.percentile(vals, [lo_pct, hi_pct])
    out = np.array(grid.data, dtype=np.float64)
    if p_hi <= p_lo:
        warnings.warn(
            f"degenerate normalization range [{p_lo}, {p_hi}]; output set to zeros",
            DegenerateRangeWarning,
            stacklevel=2,
        )
        out[valid] = 0.0
    else:
        out[valid] = (np.clip(vals, p_lo, p_hi) - p_lo) / (p_hi - p_lo)
    return grid.with_data(out.astype(np.float32))
