"""Adam, the training loop, checkpoints, evaluation and the cross-area harness."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Graph
from .losses import get_loss
from .metrics import EvalRow, binarize, boundary_iou, default_boundary_d, iou, mean_metric
from .models import Model, spec_from_json
from .patches import PatchManifest, rotate_window

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CKPT1\n"


class NumericError(FloatingPointError):
    """Non-finite loss or gradient during training."""


class DataError(RuntimeError):
    """Training or evaluation data could not be resolved."""


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-7) -> None:
    """One bias-corrected Adam update of every non-frozen param, in place.

    ``params`` maps names to Params. All gradients are checked before any
    parameter moves, so a non-finite gradient leaves the model untouched.
    """
    live = {k: p for k, p in params.items() if not p.frozen}
    for name, p in live.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in live.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


# --------------------------------------------------------------------------- data


class LoadedArea:
    """An area's aligned rasters as one C x H x W array (satellite..., gps, labels)."""

    def __init__(self, manifest: PatchManifest, cache: bool = True):
        src = manifest.load_sources()
        try:
            src.check_aligned()
        except ValueError as exc:
            raise DataError(str(exc)) from None
        self.n_sat = len(src.satellite.grids)
        arrs = [g.data for g in src.satellite.grids] + [src.gps.data, src.labels.data]
        self.array = np.stack(arrs).astype(np.float32)
        self.cache: dict | None = {} if cache else None

    def patch(self, rec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.cache is not None and rec.patch_id in self.cache:
            return self.cache[rec.patch_id]
        cont = rotate_window(self.array[: self.n_sat + 1], rec.window, rec.angle, "bilinear")
        lab = rotate_window(self.array[self.n_sat + 1 :], rec.window, rec.angle, "nearest")
        out = (cont[: self.n_sat], cont[self.n_sat :], lab)
        if self.cache is not None:
            self.cache[rec.patch_id] = out
        return out


class PatchDataset:
    """Ordered (area, record) items of one split, possibly spanning several manifests."""

    def __init__(self, items):
        self.items = list(items)

    @classmethod
    def from_manifests(cls, manifests, split: str, areas=None) -> "PatchDataset":
        areas = areas or [LoadedArea(m) for m in manifests]
        items = []
        for area, man in zip(areas, manifests):
            items.extend((area, r) for r in man.records if r.split == split)
        return cls(items)

    def __len__(self):
        return len(self.items)

    def subset(self, indices) -> "PatchDataset":
        return PatchDataset([self.items[i] for i in indices])

    def __add__(self, other) -> "PatchDataset":
        return PatchDataset(self.items + other.items)

    def sample(self, n: int, rng: np.random.Generator) -> "PatchDataset":
        """Up to n distinct items, seeded; all of them when n >= len."""
        if n >= len(self):
            return PatchDataset(self.items)
        return self.subset(np.sort(rng.choice(len(self), size=n, replace=False)))

    def batch(self, indices):
        sats, gpss, labs = zip(*(area.patch(rec) for area, rec in (self.items[i] for i in indices)))
        return np.stack(sats), np.stack(gpss), np.stack(labs)


# --------------------------------------------------------------------------- config / checkpoint


@dataclass
class TrainConfig:
    model: dict
    manifests: list = field(default_factory=list)
    loss: str = "mse"
    loss_params: dict = field(default_factory=dict)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    batch_size: int = 4
    epochs: int = 80
    batches_per_epoch: int = 500
    val_batches: int = 200
    seed: int = 0
    tau: float = 0.5
    train_area: str = ""

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.batches_per_epoch < 1 or self.val_batches < 0:
            raise ValueError("epochs, batches_per_epoch and val_batches must be non-negative (batches >= 1)")
        get_loss(self.loss)
        spec_from_json(self.model)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    model_spec: dict
    params: dict
    buffers: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    config: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def capture(cls, model: Model, adam: AdamState | None = None, config=None, rng=None):
        adam = adam or AdamState()
        return cls(
            model_spec=model.spec_json(),
            params={k: p.data.copy() for k, p in model.params.items()},
            buffers={k: v.copy() for k, v in model.buffers.items()},
            adam_m={k: v.copy() for k, v in adam.m.items()},
            adam_v={k: v.copy() for k, v in adam.v.items()},
            step=adam.step,
            config=copy.deepcopy(config or {}),
            rng_state=copy.deepcopy(rng.bit_generator.state) if rng is not None else {},
            seed=model.seed,
        )

    def to_model(self) -> Model:
        backbone, fusion = spec_from_json(self.model_spec)
        model = Model(backbone, fusion, seed=self.seed)
        missing = set(model.params) - set(self.params) | set(model.buffers) - set(self.buffers)
        if missing:
            raise DataError(f"checkpoint is missing tensors: {sorted(missing)}")
        for k, p in model.params.items():
            if p.data.shape != self.params[k].shape:
                raise DataError(f"checkpoint tensor {k!r} has shape {self.params[k].shape}, expected {p.data.shape}")
            p.data = self.params[k].astype(model.dtype, copy=True)
            p.zero_grad()
        for k in model.buffers:
            model.buffers[k][...] = self.buffers[k]
        return model

    def adam_state(self) -> AdamState:
        return AdamState(self.step, {k: v.copy() for k, v in self.adam_m.items()},
                         {k: v.copy() for k, v in self.adam_v.items()})

    def save(self, path) -> None:
        index, chunks, offset = [], [], 0
        groups = (("param", self.params), ("buffer", self.buffers),
                  ("adam_m", self.adam_m), ("adam_v", self.adam_v))
        for group, tensors in groups:
            for name, arr in tensors.items():
                raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                index.append({"name": f"{group}/{name}", "shape": list(arr.shape),
                              "offset": offset, "nbytes": len(raw)})
                chunks.append(raw)
                offset += len(raw)
        header = {"model": self.model_spec, "step": self.step, "seed": self.seed,
                  "config": self.config, "rng_state": self.rng_state, "tensors": index}
        hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<Q", len(hbytes)))
            fh.write(hbytes)
            for c in chunks:
                fh.write(c)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if not raw.startswith(CKPT_MAGIC):
            raise DataError(f"{path}: not a checkpoint (bad magic)")
        pos = len(CKPT_MAGIC)
        (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
        pos += 8
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
        payload = memoryview(raw)[pos + hlen :]
        groups = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
        for t in header["tensors"]:
            group, name = t["name"].split("/", 1)
            end = t["offset"] + t["nbytes"]
            if end > len(payload):
                raise DataError(f"{path}: truncated tensor {t['name']!r}")
            arr = np.frombuffer(payload[t["offset"] : end], dtype="<f4").astype(np.float32)
            groups[group][name] = arr.reshape(t["shape"])
        return cls(header["model"], groups["param"], groups["buffer"], groups["adam_m"],
                   groups["adam_v"], header["step"], header["config"], header["rng_state"],
                   header.get("seed", 0))


@dataclass
class History:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, val_loss, val_miou
    wall_time: list = field(default_factory=list)

    def to_csv(self, include_timing: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["epoch", "train_loss", "val_loss", "val_miou"]
        w.writerow(cols + (["wall_time"] if include_timing else []))
        for i, row in enumerate(self.epochs):
            vals = [row["epoch"]] + [repr(row[c]) for c in cols[1:]]
            if include_timing:
                vals.append(f"{self.wall_time[i]:.3f}")
            w.writerow(vals)
        return buf.getvalue()


# --------------------------------------------------------------------------- training


def _loss_fn(config: TrainConfig):
    fn = get_loss(config.loss)
    params = dict(config.loss_params)
    return lambda pred, gt: fn(pred, gt, **params)


def predict(model: Model, sat, gps, batch_size: int = 8) -> np.ndarray:
    """Eval-mode probabilities, batched."""
    out = []
    use_gps = model.fusion.stage != "none"
    for i in range(0, len(sat), batch_size):
        g = gps[i : i + batch_size] if use_gps else None
        out.append(model.forward(sat[i : i + batch_size], g, train=False).data)
    return np.concatenate(out)


def _validate(model, ds: PatchDataset, config, loss_fn, rng):
    if len(ds) == 0 or config.val_batches == 0:
        return float("nan"), float("nan")
    losses, ious = [], []
    for _ in range(config.val_batches):
        idx = rng.integers(0, len(ds), size=config.batch_size)
        sat, gps, lab = ds.batch(idx)
        prob = predict(model, sat, gps, batch_size=config.batch_size)
        losses.append(loss_fn(prob, lab).value)
        pred = binarize(prob, config.tau)
        ious.extend(iou(p[0], t[0]) for p, t in zip(pred, lab))
    return mean_metric(losses), mean_metric(ious)


def train(config: TrainConfig, manifests=None, init: Checkpoint | None = None,
          progress: Callable | None = None) -> tuple[Checkpoint, Checkpoint, History]:
    """Train per ``config``; returns (final checkpoint, best-val checkpoint, history).

    Every epoch draws ``batches_per_epoch`` batches uniformly with replacement
    from the train split, then validates on ``val_batches`` random val batches.
    The best-val checkpoint is chosen by val mIoU (first epoch wins ties).
    ``progress(epoch, row, model)`` is called after each epoch; a truthy
    return value stops training early.
    """
    if manifests is None:
        try:
            manifests = [PatchManifest.load(p) for p in config.manifests]
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot load manifests: {exc}") from None
    backbone, fusion = spec_from_json(config.model)
    model = init.to_model() if init is not None else Model(backbone, fusion, seed=config.seed)
    adam = init.adam_state() if init is not None else AdamState()
    areas = [LoadedArea(m) for m in manifests]
    train_ds = PatchDataset.from_manifests(manifests, "train", areas)
    val_ds = PatchDataset.from_manifests(manifests, "val", areas)
    if config.epochs > 0 and len(train_ds) == 0:
        raise DataError("train split is empty")
    for m in manifests:
        if m.patch_size % model.divisor:
            raise DataError(f"patch size {m.patch_size} not divisible by {model.divisor}")

    rng = np.random.default_rng(config.seed)
    loss_fn = _loss_fn(config)
    uses_gps = fusion.stage != "none"
    history = History()
    cfg_echo = config.to_dict()
    best = Checkpoint.capture(model, adam, cfg_echo, rng)
    best_miou = -math.inf

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        train_losses = []
        for _ in range(config.batches_per_epoch):
            idx = rng.integers(0, len(train_ds), size=config.batch_size)
            sat, gps, lab = train_ds.batch(idx)
            g = Graph()
            out = model.forward(sat, gps if uses_gps else None, train=True, graph=g)
            lv = loss_fn(out.data, lab)
            if not math.isfinite(lv.value):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            model.zero_grad()
            g.backward(out, lv.grad)
            adam_step(model.params, adam, config.lr, config.beta1, config.beta2, config.eps)
            train_losses.append(lv.value)
        val_loss, val_miou = _validate(model, val_ds, config, loss_fn, rng)
        row = {"epoch": epoch, "train_loss": mean_metric(train_losses),
               "val_loss": val_loss, "val_miou": val_miou}
        history.epochs.append(row)
        history.wall_time.append(time.perf_counter() - t0)
        if not math.isnan(val_miou) and val_miou > best_miou:
            best_miou = val_miou
            best = Checkpoint.capture(model, adam, cfg_echo, rng)
        log.info("epoch %d train_loss %.5f val_loss %.5f val_miou %.4f",
                 epoch, row["train_loss"], val_loss, val_miou)
        if progress is not None and progress(epoch, row, model):
            break

    final = Checkpoint.capture(model, adam, cfg_echo, rng)
    if best_miou == -math.inf:
        best = final
    return final, best, history


# --------------------------------------------------------------------------- evaluation


def evaluate_predictor(predict_fn, ds: PatchDataset, tau=0.5, d="auto", batch_size=8):
    """Mean IoU and Boundary-IoU of ``predict_fn(sat, gps) -> prob`` over ``ds``.

    Returns (miou, mboundary_iou, n, d).
    """
    if len(ds) == 0:
        raise DataError("evaluation set is empty")
    ious, bious = [], []
    d_used = None
    for i in range(0, len(ds), batch_size):
        idx = range(i, min(i + batch_size, len(ds)))
        sat, gps, lab = ds.batch(idx)
        pred = binarize(predict_fn(sat, gps), tau)
        if d_used is None:
            d_used = default_boundary_d(*lab.shape[2:]) if d in ("auto", None) else int(d)
        for p, t in zip(pred, lab):
            ious.append(iou(p[0], t[0]))
            bious.append(boundary_iou(p[0], t[0], d_used))
    return mean_metric(ious), mean_metric(bious), len(ious), d_used


def _model_predictor(model: Model):
    return lambda sat, gps: predict(model, sat, gps)


def _describe(ckpt: Checkpoint):
    b = ckpt.model_spec["backbone"]
    f = ckpt.model_spec.get("fusion", {})
    return b["kind"], f.get("stage", "none"), f.get("operator", "concatenate"), ckpt.config.get("loss", "")


def evaluate(ckpt: Checkpoint, manifests, split="test", n=1000, seed=0, tau=0.5, d="auto",
             experiment="", train_area="", test_area="") -> EvalRow:
    """Evaluate on a seeded sample of ``n`` patches (all of them when fewer exist)."""
    if isinstance(manifests, PatchManifest):
        manifests = [manifests]
    ds = PatchDataset.from_manifests(manifests, split)
    ds = ds.sample(n, np.random.default_rng(seed))
    model = ckpt.to_model()
    miou, mbiou, count, d_used = evaluate_predictor(_model_predictor(model), ds, tau, d)
    kind, stage, op, loss = _describe(ckpt)
    test_area = test_area or "+".join(sorted({r.area for _, r in ds.items}))
    return EvalRow(experiment, train_area, test_area, kind, stage, op, loss, miou, mbiou, count, d_used)


def mixed_test_set(ds_a: PatchDataset, ds_b: PatchDataset, n: int, rng) -> PatchDataset:
    """floor(n/2) items from A and ceil(n/2) from B (capped by availability)."""
    return ds_a.sample(n // 2, rng) + ds_b.sample(n - n // 2, rng)


def cross_evaluate(checkpoints: dict, manifests: dict, n=1000, seed=0, tau=0.5, d="auto",
                   split="test", experiment="") -> list[EvalRow]:
    """Evaluate every train-area checkpoint on every test area.

    ``manifests`` maps one or two area names to manifests. With two areas a
    third, mixed test area named "A+B" is added. Rows come out train-major in
    ``checkpoints`` order, test areas ordered A, B, A+B.
    """
    if len(manifests) not in (1, 2):
        raise ValueError("cross evaluation takes one or two test areas")
    full = {name: PatchDataset.from_manifests([man], split) for name, man in manifests.items()}
    names = list(full)
    if len(names) == 2:
        names.append("+".join(names))
    tests = {}
    for k, name in enumerate(names):
        rng = np.random.default_rng([seed, k])
        if name in full:
            tests[name] = full[name].sample(n, rng)
        else:
            tests[name] = mixed_test_set(*full.values(), n, rng)
    rows = []
    for train_area, ckpt in checkpoints.items():
        if ckpt is None:
            raise DataError(f"missing checkpoint for train area {train_area!r}")
        model = ckpt.to_model()
        kind, stage, op, loss = _describe(ckpt)
        for test_area, ds in tests.items():
            miou, mbiou, count, d_used = evaluate_predictor(_model_predictor(model), ds, tau, d)
            rows.append(EvalRow(experiment, train_area, test_area, kind, stage, op, loss,
                                miou, mbiou, count, d_used))
    return rows


def write_rows(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EvalRow.columns())
        for r in rows:
            w.writerow(r.as_csv_row())


def read_rows(path) -> list[EvalRow]:
    with open(path, newline="") as fh:
        out = []
        for d in csv.DictReader(fh):
            out.append(EvalRow(d["experiment"], d["train_area"], d["test_area"], d["model"],
                               d["stage"], d["operator"], d["loss"], float(d["miou"]),
                               float(d["mboundary_iou"]), int(d["n_samples"]), int(d["boundary_d"])))
        return out
