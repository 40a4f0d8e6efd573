"""Experiment configuration and the staged, content-hash-cached pipeline.

Stages run in order ingest -> prep -> patches -> train -> eval -> report.
Each stage records a key (a hash of its parameters and of the bytes of its
inputs) and the digests of its outputs under ``<workdir>/.stages``; a stage
whose key and outputs are unchanged is reported as cached and skipped.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .grid import GridStack, RasterGrid, normalize_minmax, read_grd, read_stack, upscale_cubic, write_grd, write_stack
from .ingest import GridSpec, normalize_gps, rasterize_gps, rasterize_labels, read_gps_csv, read_roads_csv
from .patches import AreaSources, PatchManifest, build_manifest
from .report import ReportLayout, emit_report
from .synth import synth_dataset
from .training import Checkpoint, TrainConfig, cross_evaluate, read_rows, train, write_rows

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid experiment or command configuration."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


# --------------------------------------------------------------------------- schema

_PATH = {"type": "string", "minLength": 1}
_SAT = {"oneOf": [_PATH, {"type": "array", "items": _PATH, "minItems": 1}]}

AREA_SCHEMA = {
    "type": "object",
    "properties": {
        "satellite": _SAT, "gps": _PATH, "labels": _PATH,
        "gps_csv": _PATH, "roads_csv": _PATH, "sentinel": _SAT,
        "spec": {"oneOf": [_PATH, {"type": "object"}]},
    },
    "additionalProperties": False,
    # prepared rasters, or raw inputs to ingest and prep
    "if": {"required": ["satellite"]},
    "then": {"required": ["satellite", "gps", "labels"],
             "not": {"anyOf": [{"required": [k]} for k in ("gps_csv", "roads_csv", "sentinel")]}},
    "else": {"required": ["gps_csv", "roads_csv", "sentinel", "spec"]},
}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "required": ["areas", "model"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "workdir": {"type": "string"},
        "seed": {"type": "integer"},
        "areas": {"type": "object", "minProperties": 1, "maxProperties": 2,
                  "propertyNames": {"pattern": r"^[A-Za-z0-9_\-]+$"},
                  "additionalProperties": AREA_SCHEMA},
        "prep": {"type": "object", "additionalProperties": False, "properties": {
            "upscale_factor": {"type": "integer", "minimum": 1},
            "lo_pct": {"type": "number", "minimum": 0, "maximum": 100},
            "hi_pct": {"type": "number", "minimum": 0, "maximum": 100},
            "gps_clip_pct": {"type": "number", "exclusiveMinimum": 0, "maximum": 100},
            "skip_bad": {"type": "boolean"},
        }},
        "patches": {"type": "object", "additionalProperties": False, "properties": {
            "size": {"type": "integer", "minimum": 1},
            "overlap": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "angles": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
            "ratios": {"type": "array", "items": {"type": "number", "minimum": 0},
                       "minItems": 3, "maxItems": 3},
            "seed": {"type": "integer"},
            "inset": {"type": "boolean"},
        }},
        "model": {"type": "object", "required": ["backbone"]},
        "train": {"type": "object"},
        "train_areas": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "eval": {"type": "object", "additionalProperties": False, "properties": {
            "n": {"type": "integer", "minimum": 1},
            "tau": {"type": "number"},
            "d": {"oneOf": [{"type": "integer", "minimum": 1}, {"const": "auto"}]},
            "split": {"enum": ["train", "val", "test"]},
            "checkpoint": {"enum": ["best", "final"]},
            "seed": {"type": "integer"},
        }},
        "report": {"type": "object"},
    },
}

PREP_DEFAULTS = {"upscale_factor": 4, "lo_pct": 2.0, "hi_pct": 98.0, "gps_clip_pct": 99.0, "skip_bad": False}
PATCH_DEFAULTS = {"size": 512, "overlap": 0.2, "angles": [0, 45, 90, 135, 180, 225, 270, 315],
                  "ratios": [0.6, 0.2, 0.2], "seed": 0, "inset": False}
EVAL_DEFAULTS = {"n": 1000, "tau": 0.5, "d": "auto", "split": "test", "checkpoint": "best", "seed": 0}


def _error_path(err) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate(doc: dict, schema: dict = EXPERIMENT_SCHEMA) -> None:
    """Raise ConfigError listing every schema violation with its field path."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigError("; ".join(f"{_error_path(e)}: {e.message}" for e in errors))


@dataclass
class ExperimentConfig:
    doc: dict
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        validate(self.doc)
        if "train" in self.doc:
            bad = set(self.doc["train"]) & {"model", "manifests", "train_area"}
            if bad:
                raise ConfigError(f"train: keys {sorted(bad)} are set by the pipeline")
        for name in self.train_areas:
            for part in name.split("+"):
                if part not in self.doc["areas"]:
                    raise ConfigError(f"train_areas: {name!r} names unknown area {part!r}")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls(doc, path.resolve().parent)

    @property
    def name(self) -> str:
        return self.doc.get("name", "experiment")

    @property
    def seed(self) -> int:
        return int(self.doc.get("seed", 0))

    @property
    def workdir(self) -> Path:
        return self.resolve(self.doc.get("workdir", "run"))

    @property
    def areas(self) -> dict:
        return self.doc["areas"]

    def section(self, name: str, defaults: dict) -> dict:
        out = copy.deepcopy(defaults)
        out.update(self.doc.get(name, {}))
        return out

    @property
    def train_areas(self) -> list[str]:
        if "train_areas" in self.doc:
            return list(self.doc["train_areas"])
        names = list(self.doc["areas"])
        return names + (["+".join(names)] if len(names) > 1 else [])

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def check_files(self) -> None:
        for area, a in self.areas.items():
            for key in ("satellite", "gps", "labels", "gps_csv", "roads_csv", "sentinel", "spec"):
                if key not in a or isinstance(a[key], dict):
                    continue
                paths = a[key] if isinstance(a[key], list) else [a[key]]
                for p in paths:
                    if not self.resolve(p).exists():
                        raise ConfigError(f"areas.{area}.{key}: file not found: {p}")


# --------------------------------------------------------------------------- hashing / staging


def digest_path(path) -> str:
    """sha256 over a file's bytes, or over the sorted relative names and bytes of a directory."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(f.relative_to(path).as_posix().encode() + b"\0")
            h.update(hashlib.sha256(f.read_bytes()).digest())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


class Stager:
    def __init__(self, workdir: Path):
        self.workdir = Path(workdir)
        self.state_dir = self.workdir / ".stages"
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.log: list[tuple[str, str]] = []

    def _outputs_match(self, record: dict, outputs) -> bool:
        for p in outputs:
            rel = os.path.relpath(p, self.workdir)
            if not Path(p).exists() or record["outputs"].get(rel) != digest_path(p):
                return False
        return True

    def run(self, name: str, inputs: dict, outputs: list, fn) -> dict:
        """Run ``fn()`` unless a previous run with the same key left identical outputs.

        ``inputs`` holds parameters and paths; paths are replaced by their
        content digests when forming the key. Returns the output digests.
        """
        keyed = {k: (digest_path(v) if isinstance(v, Path) else v) for k, v in inputs.items()}
        key = _key(keyed)
        state = self.state_dir / (name.replace(":", "_").replace("+", "_plus_") + ".json")
        if state.exists():
            record = json.loads(state.read_text())
            if record.get("key") == key and self._outputs_match(record, outputs):
                self.log.append((name, "cached"))
                log.info("stage %s: cached", name)
                return record["outputs"]
        log.info("stage %s: running", name)
        try:
            fn()
        except (ConfigError, StageError):
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        digests = {os.path.relpath(p, self.workdir): digest_path(p) for p in outputs}
        state.write_text(json.dumps({"key": key, "outputs": digests}, indent=1, sort_keys=True) + "\n")
        self.log.append((name, "ran"))
        return digests


# --------------------------------------------------------------------------- prep


def crop_to_spec(grid: RasterGrid, spec: GridSpec) -> RasterGrid:
    """Cut ``grid`` to the cells of ``spec`` (same pixel size, whole-pixel offset); outside cells become nodata."""
    if not np.isclose(grid.pixel_size, spec.pixel_size, rtol=1e-9, atol=0):
        raise ValueError(f"pixel size {grid.pixel_size} does not match target {spec.pixel_size}")
    dc = (spec.origin_x - grid.origin_x) / spec.pixel_size
    dr = (grid.origin_y - spec.origin_y) / spec.pixel_size
    c0, r0 = int(round(dc)), int(round(dr))
    if abs(dc - c0) > 1e-6 or abs(dr - r0) > 1e-6:
        raise ValueError("target grid is not aligned to whole source pixels")
    out = np.full((spec.height, spec.width), grid.nodata, dtype=np.float32)
    rs, re_ = max(r0, 0), min(r0 + spec.height, grid.height)
    cs, ce = max(c0, 0), min(c0 + spec.width, grid.width)
    if rs < re_ and cs < ce:
        out[rs - r0 : re_ - r0, cs - c0 : ce - c0] = grid.data[rs:re_, cs:ce]
    return RasterGrid(spec.width, spec.height, spec.origin_x, spec.origin_y, spec.pixel_size, grid.nodata, out)


def prep_sentinel(stack: GridStack, spec: GridSpec, factor: int = 4, lo_pct=2.0, hi_pct=98.0) -> GridStack:
    """Upscale each band by ``factor`` (cubic), crop to ``spec``, then percentile-normalize to [0, 1]."""
    grids = []
    for g in stack.grids:
        up = upscale_cubic(g, factor)
        grids.append(normalize_minmax(crop_to_spec(up, spec), lo_pct, hi_pct))
    return GridStack(tuple(grids), stack.band_names)


def _read_satellite(paths) -> GridStack:
    if isinstance(paths, (str, Path)):
        p = Path(paths)
        return read_stack(p) if p.is_dir() else GridStack((read_grd(p),), (p.stem,))
    return GridStack(tuple(read_grd(p) for p in paths), tuple(Path(p).stem for p in paths))


def _load_spec(cfg: ExperimentConfig, spec) -> GridSpec:
    if isinstance(spec, dict):
        return GridSpec(**spec)
    return GridSpec.from_json(cfg.resolve(spec))


def ingest_area(gps_csv, roads_csv, spec: GridSpec, out_dir, clip_pct=99.0, skip_bad=False) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats: dict = {}
    counts, outside = rasterize_gps(read_gps_csv(gps_csv, skip_bad=skip_bad, stats=stats), spec)
    write_grd(counts, out_dir / "gps_counts.grd")
    write_grd(normalize_gps(counts, clip_pct), out_dir / "gps.grd")
    write_grd(rasterize_labels(read_roads_csv(roads_csv), spec), out_dir / "labels.grd")
    return {"outside": outside, **stats}


# --------------------------------------------------------------------------- pipeline


@dataclass
class PipelineResult:
    workdir: Path
    stages: list
    artifacts: dict

    def statuses(self) -> dict:
        return dict(self.stages)


def _paths_of(cfg: ExperimentConfig, value):
    if isinstance(value, list):
        return [cfg.resolve(v) for v in value]
    return cfg.resolve(value)


def run_pipeline(config, workdir=None) -> PipelineResult:
    """Execute every stage of an experiment; returns per-stage statuses and artifact paths."""
    cfg = config if isinstance(config, ExperimentConfig) else (
        ExperimentConfig.load(config) if isinstance(config, (str, Path)) else ExperimentConfig(config))
    cfg.check_files()
    work = Path(workdir) if workdir is not None else cfg.workdir
    work.mkdir(parents=True, exist_ok=True)
    work = work.resolve()
    stager = Stager(work)
    prep = cfg.section("prep", PREP_DEFAULTS)
    pcfg = cfg.section("patches", PATCH_DEFAULTS)
    ecfg = cfg.section("eval", EVAL_DEFAULTS)
    artifacts: dict = {"manifests": {}, "checkpoints": {}, "histories": {}}

    manifests = {}
    for area, a in cfg.areas.items():
        if "satellite" in a:
            sat = _paths_of(cfg, a["satellite"])
            gps, labels = cfg.resolve(a["gps"]), cfg.resolve(a["labels"])
        else:
            spec = _load_spec(cfg, a["spec"])
            ing = work / "ingest" / area
            gps, labels = ing / "gps.grd", ing / "labels.grd"
            stager.run(f"ingest:{area}",
                       {"gps_csv": cfg.resolve(a["gps_csv"]), "roads_csv": cfg.resolve(a["roads_csv"]),
                        "spec": spec.to_dict(), "clip": prep["gps_clip_pct"], "skip_bad": prep["skip_bad"]},
                       [ing / "gps_counts.grd", gps, labels],
                       lambda: ingest_area(cfg.resolve(a["gps_csv"]), cfg.resolve(a["roads_csv"]), spec, ing,
                                           prep["gps_clip_pct"], prep["skip_bad"]))
            src = _paths_of(cfg, a["sentinel"])
            sat = work / "prep" / area / "satellite"
            inputs = {"spec": spec.to_dict(), "factor": prep["upscale_factor"],
                      "lo": prep["lo_pct"], "hi": prep["hi_pct"]}
            for i, p in enumerate(src if isinstance(src, list) else [src]):
                inputs[f"sentinel{i}"] = p

            def do_prep(src=src, spec=spec, sat=sat):
                if sat.exists():
                    shutil.rmtree(sat)
                write_stack(prep_sentinel(_read_satellite(src), spec, prep["upscale_factor"],
                                          prep["lo_pct"], prep["hi_pct"]), sat)
            stager.run(f"prep:{area}", inputs, [sat], do_prep)

        man_path = work / "patches" / area / "manifest.json"

        def do_patches(area=area, sat=sat, gps=gps, labels=labels, man_path=man_path):
            sources = AreaSources(_read_satellite(sat), read_grd(gps), read_grd(labels))
            rel = lambda p: os.path.relpath(p, man_path.parent)
            sat_rel = [rel(p) for p in sat] if isinstance(sat, list) else rel(sat)
            man = build_manifest(sources, area, pcfg["size"], pcfg["overlap"], pcfg["angles"],
                                 pcfg["ratios"], pcfg["seed"], pcfg["inset"],
                                 {"satellite": sat_rel, "gps": rel(gps), "labels": rel(labels)})
            man_path.parent.mkdir(parents=True, exist_ok=True)
            man.save(man_path)

        inputs = {"patches": pcfg, "area": area, "gps": gps, "labels": labels}
        for i, p in enumerate(sat if isinstance(sat, list) else [sat]):
            inputs[f"satellite{i}"] = p
        stager.run(f"patches:{area}", inputs, [man_path], do_patches)
        manifests[area] = man_path
        artifacts["manifests"][area] = man_path

    train_doc = dict(cfg.doc.get("train", {}))
    train_doc.setdefault("seed", cfg.seed)
    for ta in cfg.train_areas:
        parts = ta.split("+")
        tdir = work / "train" / ta
        tc = dict(train_doc, model=cfg.doc["model"], train_area=ta,
                  manifests=[os.path.relpath(manifests[p], tdir) for p in parts])
        try:
            tconf = TrainConfig.from_dict(tc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None
        outs = [tdir / "final.ckpt", tdir / "best.ckpt", tdir / "history.csv"]

        def do_train(tconf=tconf, parts=parts, tdir=tdir):
            tdir.mkdir(parents=True, exist_ok=True)
            final, best, hist = train(tconf, [PatchManifest.load(manifests[p]) for p in parts])
            final.save(tdir / "final.ckpt")
            best.save(tdir / "best.ckpt")
            (tdir / "history.csv").write_text(hist.to_csv())
            (tdir / "timing.csv").write_text(
                "epoch,wall_time\n" + "".join(f"{i},{t:.3f}\n" for i, t in enumerate(hist.wall_time)))

        inputs = {"train": tc, **{f"manifest:{p}": manifests[p] for p in parts}}
        stager.run(f"train:{ta}", inputs, outs, do_train)
        artifacts["checkpoints"][ta] = tdir / f"{ecfg['checkpoint']}.ckpt"
        artifacts["histories"][ta] = tdir / "history.csv"

    matrix = work / "eval" / "matrix.csv"

    def do_eval():
        ckpts = {ta: Checkpoint.load(p) for ta, p in artifacts["checkpoints"].items()}
        mans = {a: PatchManifest.load(p) for a, p in manifests.items()}
        kw = dict(n=ecfg["n"], seed=ecfg["seed"], tau=ecfg["tau"], d=ecfg["d"], split=ecfg["split"])
        rows = cross_evaluate(ckpts, mans, experiment=cfg.name, **kw)
        matrix.parent.mkdir(parents=True, exist_ok=True)
        write_rows(rows, matrix)

    inputs = {"eval": ecfg, "name": cfg.name,
              **{f"ckpt:{k}": v for k, v in artifacts["checkpoints"].items()},
              **{f"manifest:{k}": v for k, v in manifests.items()}}
    stager.run("eval", inputs, [matrix], do_eval)
    artifacts["matrix"] = matrix

    report_prefix = work / "report" / "report"
    layout_doc = cfg.doc.get("report", {})

    def do_report():
        try:
            layout = ReportLayout.from_dict(layout_doc)
        except TypeError as exc:
            raise ConfigError(f"report: {exc}") from None
        emit_report(read_rows(matrix), layout, report_prefix, title=cfg.name)

    stager.run("report", {"layout": layout_doc, "matrix": matrix, "name": cfg.name},
               [report_prefix.with_suffix(".csv"), report_prefix.with_suffix(".md")], do_report)
    artifacts["report"] = report_prefix.with_suffix(".md")
    return PipelineResult(work, stager.log, artifacts)


def synthetic_experiment(root, seed: int = 0, n_base_patches: int = 32, size: int = 64,
                         raw: bool = True, area_seeds=(0, 1), model=None, train=None,
                         eval_cfg=None, **synth_kwargs) -> Path:
    """Write two synthetic areas and an experiment config that uses them; returns the config path."""
    root = Path(root)
    areas = {}
    for name, s in zip("AB", area_seeds):
        synth_dataset(root / "data" / name, seed=s, n_base_patches=n_base_patches, size=size,
                      write_raw=raw, **synth_kwargs)
        d = f"data/{name}"
        areas[name] = ({"gps_csv": f"{d}/raw/gps.csv", "roads_csv": f"{d}/raw/roads.csv",
                        "sentinel": f"{d}/raw/sentinel", "spec": f"{d}/spec.json"} if raw else
                       {"satellite": f"{d}/satellite", "gps": f"{d}/gps.grd", "labels": f"{d}/labels.grd"})
    doc = {
        "name": "synthetic",
        "workdir": "run",
        "seed": seed,
        "areas": areas,
        "patches": {"size": size, "overlap": 0.2, "angles": [0, 45, 90, 135, 180, 225, 270, 315],
                    "ratios": [0.6, 0.2, 0.2], "seed": seed, "inset": True},
        "model": model or {"backbone": {"kind": "unet", "depth": 3, "base_width": 8},
                           "fusion": {"stage": "early", "operator": "concatenate"}},
        "train": train or {"loss": "mse", "batch_size": 4, "epochs": 2, "batches_per_epoch": 4,
                           "val_batches": 2},
        "eval": eval_cfg or {"n": 20, "tau": 0.5, "d": "auto"},
    }
    path = root / "experiment.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path
