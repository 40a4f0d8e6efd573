"""Command-line entry point: ``roadfuse <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .grid import GridFormatError, read_grd, write_grd, write_stack
from .ingest import GridSpec, IngestError, normalize_gps, rasterize_gps, rasterize_labels, read_gps_csv, read_roads_csv
from .complexity import area_report, write_report
from .patches import DEFAULT_ANGLES, AreaSources, PatchManifest, build_manifest
from .pipeline import ConfigError, ExperimentConfig, StageError, _read_satellite, prep_sentinel, run_pipeline
from .report import ReportLayout, emit_report
from .synth import synth_dataset
from .training import (Checkpoint, DataError, NumericError, TrainConfig, cross_evaluate, evaluate, read_rows,
                       train, write_rows)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("roadfuse")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _spec(path) -> GridSpec:
    try:
        return GridSpec.from_json(path)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid grid spec: {exc}") from None


def _rel(base: Path, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


# --------------------------------------------------------------------------- commands


def cmd_ingest_gps(args):
    stats: dict = {}
    counts, outside = rasterize_gps(read_gps_csv(args.inp, skip_bad=args.skip_bad, stats=stats), _spec(args.spec))
    if args.counts_out:
        write_grd(counts, args.counts_out)
    write_grd(normalize_gps(counts, args.clip_pct), args.out)
    print(f"wrote {args.out}: {int(counts.data.sum())} points binned, {outside} outside the grid, "
          f"{stats.get('bad', 0)} bad lines skipped")


def cmd_ingest_roads(args):
    segs = read_roads_csv(args.inp)
    grid = rasterize_labels(segs, _spec(args.spec))
    write_grd(grid, args.out)
    print(f"wrote {args.out}: {len(segs)} roads, {int(grid.data.sum())} road cells")


def cmd_prep_sentinel(args):
    src = args.inp[0] if len(args.inp) == 1 else args.inp
    stack = prep_sentinel(_read_satellite(src), _spec(args.spec), args.factor, args.lo, args.hi)
    write_stack(stack, args.out)
    print(f"wrote {args.out}: {len(stack.grids)} bands at {stack.grids[0].width}x{stack.grids[0].height}")


def cmd_make_patches(args):
    cfg_path = Path(args.config)
    cfg = _load_json(cfg_path)
    base = cfg_path.resolve().parent
    try:
        src = cfg["sources"]
        sat = [_rel(base, p) for p in src["satellite"]] if isinstance(src["satellite"], list) else _rel(base, src["satellite"])
        gps, labels = _rel(base, src["gps"]), _rel(base, src["labels"])
        area = cfg.get("area", "A")
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{cfg_path}: missing field {exc}") from None
    sources = AreaSources(_read_satellite(sat), read_grd(gps), read_grd(labels))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rel = lambda p: os.path.relpath(p, out.resolve().parent)
    paths = {"satellite": [rel(p) for p in sat] if isinstance(sat, list) else rel(sat),
             "gps": rel(gps), "labels": rel(labels)}
    seed = cfg.get("seed", args.seed if args.seed is not None else 0)
    try:
        man = build_manifest(sources, area, cfg.get("size", 512), cfg.get("overlap", 0.2),
                             cfg.get("angles", DEFAULT_ANGLES), cfg.get("ratios", (0.6, 0.2, 0.2)),
                             seed, cfg.get("inset", False), paths)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    man.save(out)
    print(f"wrote {out}: {len(man.records)} patches")


def cmd_train(args):
    cfg_path = Path(args.config)
    doc = _load_json(cfg_path)
    out = Path(doc.pop("out_dir", args.out or cfg_path.with_suffix("")))
    if args.seed is not None:
        doc["seed"] = args.seed
    doc["manifests"] = [str(_rel(cfg_path.resolve().parent, p)) for p in doc.get("manifests", [])]
    try:
        tconf = TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cfg_path}: {exc}") from None
    final, best, hist = train(tconf)
    out.mkdir(parents=True, exist_ok=True)
    final.save(out / "final.ckpt")
    best.save(out / "best.ckpt")
    (out / "history.csv").write_text(hist.to_csv())
    (out / "timing.csv").write_text("epoch,wall_time\n" + "".join(
        f"{i},{t:.3f}\n" for i, t in enumerate(hist.wall_time)))
    print(f"wrote {out}: {len(hist.epochs)} epochs")


def cmd_eval(args):
    mans = [PatchManifest.load(p) for p in args.manifest]
    row = evaluate(Checkpoint.load(args.model), mans, args.split, args.n,
                   args.seed if args.seed is not None else 0, args.tau, _parse_d(args.d),
                   args.experiment, args.train_area, args.test_area)
    write_rows([row], args.out)
    print(f"{row.test_area}: mIoU {row.miou:.4f} mBoundaryIoU {row.mboundary_iou:.4f} (n={row.n_samples}, d={row.boundary_d})")


def cmd_cross_eval(args):
    cfg_path = Path(args.config)
    cfg = _load_json(cfg_path)
    base = cfg_path.resolve().parent
    try:
        ckpts = {k: Checkpoint.load(_rel(base, p)) for k, p in cfg["checkpoints"].items()}
        mans = {k: PatchManifest.load(_rel(base, p)) for k, p in cfg["manifests"].items()}
    except KeyError as exc:
        raise ConfigError(f"{cfg_path}: missing field {exc}") from None
    if len(mans) not in (1, 2):
        raise ConfigError(f"{cfg_path}: manifests must name one or two areas")
    seed = cfg.get("seed", args.seed if args.seed is not None else 0)
    rows = cross_evaluate(ckpts, mans, cfg.get("n", 1000), seed, cfg.get("tau", 0.5),
                          _parse_d(cfg.get("d", "auto")), cfg.get("split", "test"), cfg.get("experiment", ""))
    write_rows(rows, args.out)
    print(f"wrote {args.out}: {len(rows)} rows")


def cmd_complexity(args):
    rows, summary = area_report([PatchManifest.load(p) for p in args.manifest], base_only=args.base_only)
    write_report(rows, summary, args.out, args.summary)
    for area, s in sorted(summary.items()):
        print(f"{area}: entropy mean {s['entropy_mean']:.4f} var {s['entropy_var']:.4f}; "
              f"homogeneity mean {s['homogeneity_mean']:.4f} var {s['homogeneity_var']:.4f}")


def cmd_synth(args):
    area = synth_dataset(args.out, seed=args.seed if args.seed is not None else 0,
                         n_base_patches=args.n_base, size=args.size, noise_sigma=args.noise_sigma,
                         hidden_frac=args.hidden_frac)
    print(f"wrote {args.out}: {area.spec.width}x{area.spec.height}, {len(area.segments)} roads")


def cmd_report(args):
    rows = [r for p in args.rows for r in read_rows(p)]
    layout = ReportLayout()
    if args.layout:
        try:
            layout = ReportLayout.from_dict(_load_json(args.layout))
        except TypeError as exc:
            raise ConfigError(f"{args.layout}: {exc}") from None
    try:
        emit_report(rows, layout, args.out, title=args.title)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print(f"wrote {args.out}.csv and {args.out}.md")


def cmd_run(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.doc["seed"] = args.seed
    res = run_pipeline(cfg, args.workdir)
    for name, status in res.stages:
        print(f"{name}: {status}")
    print(f"report: {res.artifacts['report']}")


def _parse_d(d):
    return d if d in ("auto", None) else int(d)


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    def globals_parser(suppress: bool) -> argparse.ArgumentParser:
        # accepted before or after the subcommand; the subcommand copy must not reset a value given earlier
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        gp = argparse.ArgumentParser(add_help=False)
        gp.add_argument("--seed", type=int, default=d(None), help="seed override")
        gp.add_argument("--threads", type=int, default=d(None), help="BLAS thread limit")
        gp.add_argument("--verbose", "-v", action="store_true", default=d(False))
        return gp

    common = globals_parser(True)
    p = argparse.ArgumentParser(prog="roadfuse", parents=[globals_parser(False)],
                                description="Satellite + GPS road extraction at configurable scale.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    sp = add("ingest-gps", cmd_ingest_gps, "bin GPS points into a normalized frequency raster")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--clip-pct", type=float, default=99.0)
    sp.add_argument("--skip-bad", action="store_true")
    sp.add_argument("--counts-out", default=None, help="also write the raw count raster")

    sp = add("ingest-roads", cmd_ingest_roads, "buffer road polylines into a binary label raster")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)

    sp = add("prep-sentinel", cmd_prep_sentinel, "upscale, crop and normalize satellite bands")
    sp.add_argument("--in", dest="inp", nargs="+", required=True, help="stack directory or .grd bands")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--factor", type=int, default=4)
    sp.add_argument("--lo", type=float, default=2.0)
    sp.add_argument("--hi", type=float, default=98.0)

    sp = add("make-patches", cmd_make_patches, "build a patch manifest")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a model")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)

    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", action="append", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--tau", type=float, default=0.5)
    sp.add_argument("--d", default="auto")
    sp.add_argument("--experiment", default="")
    sp.add_argument("--train-area", default="")
    sp.add_argument("--test-area", default="")
    sp.add_argument("--out", required=True)

    sp = add("cross-eval", cmd_cross_eval, "train-area x test-area evaluation matrix")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)

    sp = add("complexity", cmd_complexity, "entropy and GLCM homogeneity per patch")
    sp.add_argument("--manifest", action="append", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--summary", default=None)
    sp.add_argument("--base-only", action="store_true", help="unrotated patches only")

    sp = add("synth", cmd_synth, "write a synthetic area")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-base", type=int, default=32)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--noise-sigma", type=float, default=0.1)
    sp.add_argument("--hidden-frac", type=float, default=0.0)

    sp = add("report", cmd_report, "emit CSV and Markdown result tables")
    sp.add_argument("--rows", action="append", required=True)
    sp.add_argument("--layout", default=None)
    sp.add_argument("--title", default="Results")
    sp.add_argument("--out", required=True, help="output prefix")

    sp = add("run", cmd_run, "run the full pipeline from an experiment config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--workdir", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(args.threads)
    try:
        args.func(args)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, (NumericError, FloatingPointError)):
            return EXIT_NUMERIC
        return EXIT_CONFIG if isinstance(exc.cause, ConfigError) else EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, IngestError, GridFormatError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if limiter is not None:
            limiter.unregister()


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
