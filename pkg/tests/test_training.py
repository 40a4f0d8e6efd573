import math

import numpy as np
import pytest

import roadfuse.training as T
from roadfuse.autodiff import Param
from roadfuse.losses import LossValue
from roadfuse.models import BackboneSpec, FusionSpec, build_model
from roadfuse.training import (AdamState, Checkpoint, DataError, History, NumericError, PatchDataset,
                               TrainConfig, adam_step, cross_evaluate, evaluate, evaluate_predictor,
                               mixed_test_set, read_rows, train, write_rows)

from oracles import adam_unrolled
from toy import toy_config, toy_manifest


@pytest.fixture(scope="module")
def areas(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return {"A": toy_manifest(root, "A", seed=0, n_base=8, size=32),
            "B": toy_manifest(root, "B", seed=1, n_base=8, size=32)}


def small_config(stage="early", epochs=2, **kw):
    base = dict(model={"backbone": {"kind": "unet", "depth": 2, "base_width": 4},
                       "fusion": {"stage": stage, "operator": "concatenate"}},
                batch_size=2, epochs=epochs, batches_per_epoch=3, val_batches=2, seed=5)
    base.update(kw)
    return TrainConfig(**base)


# --------------------------------------------------------------------------- Adam


def _param(value):
    return Param("p", np.array(value, dtype=np.float64))


def test_adam_zero_gradient_leaves_params():
    p = _param([1.0, -2.0, 3.0])
    adam_step({"p": p}, AdamState())
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])


def test_adam_single_step_closed_form():
    p = _param([0.5])
    p.grad = np.array([1.0])
    adam_step({"p": p}, AdamState(), lr=1e-3, eps=1e-7)
    # m_hat = g and v_hat = g^2 after one bias-corrected step
    assert abs(p.data[0] - (0.5 - 1e-3 / (1.0 + 1e-7))) < 1e-15


def test_adam_matches_unrolled_recurrence(rng):
    grads = rng.normal(size=(6, 3))
    theta0 = rng.normal(size=3)
    p = _param(theta0.copy())
    st = AdamState()
    for g in grads:
        p.grad = g.copy()
        adam_step({"p": p}, st, lr=1e-2, beta1=0.8, beta2=0.95, eps=1e-7)
    for j in range(3):
        assert abs(p.data[j] - adam_unrolled(grads[:, j], theta0[j], 1e-2, 0.8, 0.95, 1e-7)) < 1e-12
    assert st.step == 6


def test_adam_nonfinite_names_param_and_moves_nothing():
    a, b = _param([1.0]), _param([2.0])
    a.name, b.name = "a", "b"
    a.grad = np.array([1.0])
    b.grad = np.array([np.nan])
    st = AdamState()
    with pytest.raises(NumericError, match="'b'"):
        adam_step({"a": a, "b": b}, st)
    assert a.data[0] == 1.0 and st.step == 0


def test_adam_skips_frozen():
    p = _param([1.0])
    p.frozen = True
    p.grad = np.array([1.0])
    adam_step({"p": p}, AdamState())
    assert p.data[0] == 1.0


# --------------------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(lr=0)
    with pytest.raises(ValueError):
        small_config(batch_size=0)
    with pytest.raises(ValueError):
        small_config(loss="dice")
    with pytest.raises(ValueError, match="unknown train config keys"):
        TrainConfig.from_dict({"model": small_config().model, "momentum": 0.9})
    cfg = small_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, TrainConfig(model=cfg.model).val_batches) == \
        (1e-3, 0.9, 0.999, 1e-7, 200)


# --------------------------------------------------------------------------- train


def test_epochs_zero_returns_initialization(areas):
    cfg = small_config(epochs=0)
    final, best, hist = train(cfg, [areas["A"]])
    init = build_model(BackboneSpec("unet", 2, 4), FusionSpec("early"), seed=cfg.seed)
    for k, p in init.params.items():
        np.testing.assert_array_equal(final.params[k], p.data)
    assert hist.epochs == [] and final.step == 0
    assert hist.to_csv() == "epoch,train_loss,val_loss,val_miou\n"


def test_training_is_deterministic(areas):
    runs = [train(small_config(), [areas["A"]]) for _ in range(2)]
    (f1, b1, h1), (f2, b2, h2) = runs
    assert h1.to_csv() == h2.to_csv()
    assert len(h1.epochs) == 2
    for k in f1.params:
        np.testing.assert_array_equal(f1.params[k], f2.params[k])
        np.testing.assert_array_equal(b1.params[k], b2.params[k])
    assert f1.step == 2 * 3


def test_seed_changes_run(areas):
    _, _, h1 = train(small_config(seed=1), [areas["A"]])
    _, _, h2 = train(small_config(seed=2), [areas["A"]])
    assert h1.to_csv() != h2.to_csv()


def test_history_rows_and_timing(areas):
    _, _, hist = train(small_config(epochs=3), [areas["A"]])
    assert [r["epoch"] for r in hist.epochs] == [0, 1, 2]
    assert len(hist.wall_time) == 3
    lines = hist.to_csv(include_timing=True).splitlines()
    assert lines[0].endswith(",wall_time") and len(lines) == 4
    assert "wall_time" not in hist.to_csv()


def test_best_checkpoint_tracks_val_miou(areas):
    seen = []
    final, best, hist = train(small_config(epochs=3), [areas["A"]],
                              progress=lambda e, row, m: seen.append(row["val_miou"]) and False)
    first_best = int(np.argmax(seen))
    assert best.step == (first_best + 1) * 3
    assert final.step == 9


def test_progress_can_stop_early(areas):
    _, _, hist = train(small_config(epochs=5), [areas["A"]], progress=lambda e, row, m: e == 1)
    assert len(hist.epochs) == 2


def test_training_from_two_areas(areas):
    final, _, hist = train(small_config(epochs=1), [areas["A"], areas["B"]])
    assert len(hist.epochs) == 1


def test_nonfinite_loss_aborts(areas, monkeypatch):
    real = T.get_loss
    monkeypatch.setattr(T, "get_loss", lambda name: (lambda p, y, **kw: LossValue(math.nan, np.zeros_like(p)))
                        if name == "mse" else real(name))
    with pytest.raises(NumericError, match="epoch 0"):
        train(small_config(), [areas["A"]])


def test_data_errors(areas, tmp_path):
    with pytest.raises(DataError, match="not divisible"):
        train(small_config(model={"backbone": {"kind": "unet", "depth": 6, "base_width": 2},
                                  "fusion": {"stage": "none"}}), [areas["A"]])
    with pytest.raises(DataError, match="cannot load manifests"):
        train(small_config(manifests=[str(tmp_path / "missing.json")]))


def test_manifest_paths_from_config(areas):
    path = areas["A"].base_dir / "manifest.json"
    _, _, hist = train(small_config(epochs=1, manifests=[str(path)]))
    _, _, ref = train(small_config(epochs=1), [areas["A"]])
    assert hist.to_csv() == ref.to_csv()


def test_loss_decreases_over_epoch_windows(tmp_path):
    man = toy_manifest(tmp_path, "A", seed=3, n_base=8, size=32)
    n_train = len(PatchDataset.from_manifests([man], "train"))
    cfg = toy_config("unet", "early", n_train, epochs=30, depth=2, width=4)
    _, _, hist = train(cfg, [man])
    losses = [r["train_loss"] for r in hist.epochs]
    windows = [np.mean(losses[i:i + 10]) for i in range(0, 30, 10)]
    assert all(b <= a for a, b in zip(windows, windows[1:]))


# --------------------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_identical(areas, tmp_path, rng):
    final, _, _ = train(small_config(stage="late2"), [areas["A"]])
    path = tmp_path / "m.ckpt"
    final.save(path)
    assert path.read_bytes().startswith(b"CKPT1\n")
    back = Checkpoint.load(path)
    sat = rng.random((2, 4, 32, 32)).astype(np.float32)
    gps = rng.random((2, 1, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(final.to_model()(sat, gps).data, back.to_model()(sat, gps).data)
    assert back.step == final.step and back.config == final.config and back.model_spec == final.model_spec
    assert back.rng_state == final.rng_state
    for k in final.adam_m:
        np.testing.assert_array_equal(back.adam_m[k], final.adam_m[k])
        np.testing.assert_array_equal(back.adam_v[k], final.adam_v[k])


def test_checkpoint_errors(areas, tmp_path):
    final, _, _ = train(small_config(epochs=0), [areas["A"]])
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE")
    with pytest.raises(DataError, match="bad magic"):
        Checkpoint.load(bad)
    path = tmp_path / "m.ckpt"
    final.save(path)
    raw = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-8])
    with pytest.raises(DataError, match="truncated"):
        Checkpoint.load(tmp_path / "cut.ckpt")
    ck = Checkpoint.load(path)
    ck.params.pop(next(iter(ck.params)))
    with pytest.raises(DataError, match="missing tensors"):
        ck.to_model()


# --------------------------------------------------------------------------- evaluation


def test_oracle_and_constant_predictors(areas):
    ds = PatchDataset.from_manifests([areas["A"]], "test")
    # evaluate_predictor walks the set in order in batches of 8
    out = []
    for i in range(0, len(ds), 8):
        out.append(ds.batch(range(i, min(i + 8, len(ds))))[2])
    it = iter(out)
    miou, mb, n, d = evaluate_predictor(lambda s, g: next(it), ds)
    assert miou == 1.0 and mb == 1.0 and n == len(ds)
    assert all(ds.batch([i])[2].any() for i in range(len(ds)))
    miou0, _, _, _ = evaluate_predictor(lambda s, g: np.zeros((len(s), 1) + s.shape[2:]), ds)
    assert miou0 == 0.0


def test_two_patch_hand_average(areas):
    ds = PatchDataset.from_manifests([areas["A"]], "test").subset([0, 1])
    labs = ds.batch([0, 1])[2]
    pred = labs.copy()
    pred[0, 0, :, :16] = 0  # first patch: keep the right half only
    hand = [np.logical_and(pred[0, 0], labs[0, 0]).sum() / labs[0, 0].sum(), 1.0]
    miou, _, n, _ = evaluate_predictor(lambda s, g: pred, ds, batch_size=2)
    assert n == 2 and abs(miou - (hand[0] + hand[1]) / 2) < 1e-15


def test_evaluate_row_and_sample_cap(areas):
    final, _, _ = train(small_config(epochs=0), [areas["A"]])
    n_test = len(PatchDataset.from_manifests([areas["A"]], "test"))
    row = evaluate(final, areas["A"], n=10 ** 6, experiment="x", train_area="A")
    assert row.n_samples == n_test and row.test_area == "A"
    assert (row.model, row.stage, row.operator, row.loss) == ("unet", "early", "concatenate", "mse")
    assert row.boundary_d == 1
    small = evaluate(final, areas["A"], n=3, seed=4)
    assert small.n_samples == 3
    assert evaluate(final, areas["A"], n=3, seed=4) == small


def test_mixed_composition(areas):
    a = PatchDataset.from_manifests([areas["A"]], "train")
    b = PatchDataset.from_manifests([areas["B"]], "train")
    for n in (1, 2, 7, 10):
        mix = mixed_test_set(a, b, n, np.random.default_rng(n))
        counts = [sum(r.area == name for _, r in mix.items) for name in "AB"]
        assert counts == [n // 2, n - n // 2]


def test_cross_evaluate_grid(areas, tmp_path):
    ck = {k: train(small_config(epochs=0, seed=i), [areas[k]])[0] for i, k in enumerate("AB")}
    ck["A+B"] = train(small_config(epochs=0, seed=9), [areas["A"], areas["B"]])[0]
    rows = cross_evaluate(ck, areas, n=5, seed=2)
    assert [(r.train_area, r.test_area) for r in rows] == \
        [(t, s) for t in ("A", "B", "A+B") for s in ("A", "B", "A+B")]
    assert all(r.n_samples == 5 for r in rows)
    one = cross_evaluate({"A": ck["A"]}, {"A": areas["A"]}, n=5, seed=2)
    assert len(one) == 1 and one[0] == rows[0]
    path = tmp_path / "m.csv"
    write_rows(rows, path)
    assert read_rows(path) == rows
    with pytest.raises(DataError):
        cross_evaluate({"A": None}, areas, n=5)
    with pytest.raises(ValueError):
        cross_evaluate(ck, {}, n=5)
