"""Tiling aligned rasters into rotated training patches with leakage-safe splits."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .grid import GridStack, RasterGrid, read_grd, read_stack

DEFAULT_ANGLES = (0, 45, 90, 135, 180, 225, 270, 315)
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PatchRecord:
    patch_id: int
    base_id: int
    window: tuple[int, int, int]
    angle: int
    split: str
    area: str

    def to_json(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        return d

    @classmethod
    def from_json(cls, d) -> "PatchRecord":
        return cls(int(d["patch_id"]), int(d["base_id"]), tuple(int(v) for v in d["window"]),
                   int(d["angle"]), str(d["split"]), str(d["area"]))


@dataclass
class PatchManifest:
    records: list[PatchRecord]
    sources: dict
    seed: int
    patch_size: int = 512
    base_dir: Path | None = field(default=None, compare=False, repr=False)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "patch_size": self.patch_size,
            "sources": self.sources,
            "records": [r.to_json() for r in self.records],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PatchManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        return cls(
            records=[PatchRecord.from_json(r) for r in d["records"]],
            sources=d["sources"],
            seed=int(d["seed"]),
            patch_size=int(d["patch_size"]),
            base_dir=path.resolve().parent,
        )

    def split(self, name: str) -> list[PatchRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, p: str) -> Path:
        p = Path(p)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    def load_sources(self) -> "AreaSources":
        sat = self.sources["satellite"]
        if isinstance(sat, str):
            stack = read_stack(self.resolve(sat))
        else:
            grids = [read_grd(self.resolve(p)) for p in sat]
            names = [Path(p).stem for p in sat]
            stack = GridStack(tuple(grids), tuple(names))
        return AreaSources(
            satellite=stack,
            gps=read_grd(self.resolve(self.sources["gps"])),
            labels=read_grd(self.resolve(self.sources["labels"])),
        )


@dataclass(frozen=True)
class AreaSources:
    satellite: GridStack
    gps: RasterGrid
    labels: RasterGrid

    def check_aligned(self) -> None:
        ref = self.satellite.geometry
        for name, g in (("gps", self.gps), ("labels", self.labels)):
            if g is None:
                raise ValueError(f"source band {name!r} is missing")
            if g.geometry() != ref:
                raise ValueError(f"source band {name!r} is misaligned with the satellite stack")

    def stack(self) -> GridStack:
        """Satellite bands followed by gps and labels, as one aligned stack."""
        return GridStack(
            self.satellite.grids + (self.gps, self.labels),
            self.satellite.band_names + ("gps", "labels"),
        )


# --------------------------------------------------------------------------- windows


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _starts(length: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] + size < length:
        starts.append(length - size)
    return starts


def generate_windows(extent, size: int, overlap: float = 0.2) -> list[tuple[int, int, int]]:
    """Regular (col0, row0, size) windows with stride round(size * (1 - overlap)).

    The last row and column are shifted inward so that every window lies
    inside the extent. ``extent`` is anything with width and height.
    """
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    if size < 1 or size > extent.width or size > extent.height:
        raise ValueError(f"extent {extent.width}x{extent.height} is smaller than patch size {size}")
    stride = max(1, _round_half_up(size * (1 - overlap)))
    cols = _starts(extent.width, size, stride)
    rows = _starts(extent.height, size, stride)
    return [(c, r, size) for r in rows for c in cols]


def rotation_pad(size: int) -> int:
    """Margin on each side needed so a window rotated by any angle stays inside."""
    return (math.ceil(size * math.sqrt(2)) - size + 1) // 2


def _support_ok(window, angle, width, height) -> bool:
    c0, r0, size = window
    pad = 0 if angle % 90 == 0 else rotation_pad(size)
    return c0 - pad >= 0 and r0 - pad >= 0 and c0 + size + pad <= width and r0 + size + pad <= height


# --------------------------------------------------------------------------- extraction


def _sample(arr: np.ndarray, window, angle: float, interp: str) -> np.ndarray:
    """Inverse-map rotation sampling around the window center. arr is C x H x W."""
    c0, r0, size = window
    theta = math.radians(angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    off = np.arange(size) + 0.5 - size / 2.0
    dy, dx = np.meshgrid(off, off, indexing="ij")
    sx = cos_t * dx - sin_t * dy
    sy = sin_t * dx + cos_t * dy
    # continuous index coordinates (pixel centers at integers)
    fx = c0 + size / 2.0 + sx - 0.5
    fy = r0 + size / 2.0 + sy - 0.5
    h, w = arr.shape[1:]
    if interp == "nearest":
        ix = np.clip(np.floor(fx + 0.5).astype(np.int64), 0, w - 1)
        iy = np.clip(np.floor(fy + 0.5).astype(np.int64), 0, h - 1)
        return arr[:, iy, ix]
    if interp != "bilinear":
        raise ValueError(f"unknown interpolation {interp!r}")
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    ax = (fx - x0)[None]
    ay = (fy - y0)[None]
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    a = arr.astype(np.float64)
    top = a[:, y0c, x0c] * (1 - ax) + a[:, y0c, x1c] * ax
    bot = a[:, y1c, x0c] * (1 - ax) + a[:, y1c, x1c] * ax
    return (top * (1 - ay) + bot * ay).astype(arr.dtype)


def rotate_window(arr: np.ndarray, window, angle: int, interp: str = "bilinear") -> np.ndarray:
    """Extract ``window`` from a C x H x W array rotated counterclockwise by ``angle`` degrees."""
    c0, r0, size = window
    h, w = arr.shape[1:]
    if not _support_ok(window, angle, w, h):
        raise ValueError(f"rotation support of window {window} at {angle} deg leaves the extent")
    if angle % 90 == 0:
        crop = arr[:, r0 : r0 + size, c0 : c0 + size]
        return np.ascontiguousarray(np.rot90(crop, k=(angle // 90) % 4, axes=(1, 2)))
    return _sample(arr, window, angle, interp)


def extract_rotated_patch(stack: GridStack, record: PatchRecord, interp: str = "bilinear",
                          nearest_bands=("labels",)) -> np.ndarray:
    """C x size x size patch for ``record``. Bands named in ``nearest_bands``
    are always sampled nearest-neighbour so labels stay binary."""
    arr = stack.array()
    out = []
    for i, name in enumerate(stack.band_names):
        mode = "nearest" if name in nearest_bands else interp
        out.append(rotate_window(arr[i : i + 1], record.window, record.angle, mode)[0])
    return np.stack(out)


# --------------------------------------------------------------------------- manifest


def assign_splits(n: int, ratios, rng: np.random.Generator) -> list[str]:
    """Split labels for n base windows after a seeded shuffle."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    total = float(sum(ratios))
    # cumulative cut points keep the three counts summing to n
    cut_train = _round_half_up(n * ratios[0] / total)
    cut_val = _round_half_up(n * (ratios[0] + ratios[1]) / total)
    order = rng.permutation(n)
    labels = [""] * n
    for rank, i in enumerate(order):
        labels[i] = "train" if rank < cut_train else ("val" if rank < cut_val else "test")
    return labels


def build_manifest(sources: AreaSources, area: str, size: int = 512, overlap: float = 0.2,
                   angles=DEFAULT_ANGLES, ratios=(0.6, 0.2, 0.2), seed: int = 0,
                   inset: bool = False, source_paths: dict | None = None) -> PatchManifest:
    """Enumerate windows, augment by angle and assign splits per base window.

    All rotations of a base window share its split. Diagonal rotations whose
    support would leave the extent are dropped; with ``inset=True`` windows
    are laid out inside a margin so every angle is kept.
    """
    sources.check_aligned()
    width, height = sources.satellite.geometry[:2]
    angles = tuple(int(a) for a in angles)
    for a in angles:
        if a % 45 != 0 or not 0 <= a < 360:
            raise ValueError(f"angle {a} not a multiple of 45 in [0, 360)")
    pad = rotation_pad(size) if inset and any(a % 90 for a in angles) else 0

    ext = SimpleNamespace(width=width - 2 * pad, height=height - 2 * pad)
    windows = [(c + pad, r + pad, s) for c, r, s in generate_windows(ext, size, overlap)]

    rng = np.random.default_rng(seed)
    splits = assign_splits(len(windows), ratios, rng)
    records = []
    for base_id, win in enumerate(windows):
        for a in angles:
            if _support_ok(win, a, width, height):
                records.append(PatchRecord(len(records), base_id, win, a, splits[base_id], area))
    return PatchManifest(records, dict(source_paths or {}), int(seed), int(size))


def check_leakage(manifest: PatchManifest) -> dict[int, set]:
    """base_ids that appear in more than one split (empty when clean)."""
    seen: dict[int, set] = {}
    for r in manifest.records:
        seen.setdefault(r.base_id, set()).add(r.split)
    return {b: s for b, s in seen.items() if len(s) > 1}
