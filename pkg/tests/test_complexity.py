import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage.feature import graycomatrix

from roadfuse.complexity import (GLCM_OFFSETS, ComplexityRow, area_report, glcm, grayscale, histogram_table,
                                 homogeneity, quantize, shannon_entropy, summarize, write_report)

from oracles import glcm_loop
from toy import texture_manifest


def homogeneity_loop(m):
    tot = 0.0
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            tot += m[i, j] / (1 + abs(i - j))
    return tot


def test_entropy_examples():
    assert shannon_entropy(np.full((5, 5), 0.3)) == 0.0
    half = np.zeros((4, 4))
    half[:2] = 1.0
    assert shannon_entropy(half) == 1.0
    # counts {8, 4, 2, 2} over four distinct levels
    vals = np.repeat([0.0, 0.3, 0.6, 0.9], [8, 4, 2, 2]).reshape(4, 4)
    assert shannon_entropy(vals) == 1.75
    with pytest.raises(ValueError):
        shannon_entropy(np.zeros((0, 3)))


def test_quantize_bins():
    np.testing.assert_array_equal(quantize(np.array([0.0, 0.49, 0.5, 0.999, 1.0, 1.7, -1]), 2),
                                  [0, 0, 1, 1, 1, 1, 0])


def test_glcm_examples():
    m = glcm(np.full((4, 4), 0.5))
    assert m[32, 32] == 1.0 and m.sum() == 1.0
    pair = glcm(np.array([[0, 63]]), levels=64, offsets=((0, 1),), quantized=True)
    assert pair[0, 63] == 0.5 and pair[63, 0] == 0.5 and pair.sum() == 1.0
    with pytest.raises(ValueError):
        glcm(np.zeros((1, 1)))
    with pytest.raises(ValueError):
        glcm(np.zeros(4))


def test_glcm_matches_loop_oracle(rng):
    for levels in (4, 64):
        for _ in range(5):
            q = rng.integers(0, levels, size=(8, 8))
            np.testing.assert_array_equal(glcm(q, levels, quantized=True), glcm_loop(q, levels, GLCM_OFFSETS))


def test_glcm_matches_skimage(rng):
    q = rng.integers(0, 16, size=(12, 12)).astype(np.uint8)
    # skimage angles 0, 45, 90, 135 degrees are the offsets (0,1), (-1,1), (-1,0), (-1,-1);
    # each is the reverse of one of ours, which a symmetric matrix does not distinguish
    ref = graycomatrix(q, [1], [0, np.pi / 4, np.pi / 2, 3 * np.pi / 4], levels=16, symmetric=True)
    ref = ref[:, :, 0, :].sum(axis=-1).astype(np.float64)
    np.testing.assert_allclose(glcm(q, 16, quantized=True), ref / ref.sum(), rtol=0, atol=1e-15)


def test_homogeneity_examples(rng):
    assert homogeneity(glcm(np.full((6, 6), 0.2))) == 1.0
    checker = (np.indices((6, 6)).sum(axis=0) % 2).astype(float)
    assert homogeneity(glcm(checker, levels=2, offsets=((0, 1),))) == 0.5
    m = rng.random((9, 9))
    m /= m.sum()
    assert abs(homogeneity(m) - homogeneity_loop(m)) < 1e-12
    with pytest.raises(ValueError):
        homogeneity(np.ones((3, 3)))


patches = st.integers(0, 2 ** 31 - 1).map(lambda s: np.random.default_rng(s).random((10, 10)) ** 3)


@given(patches)
def test_bounds_and_symmetry(p):
    e = shannon_entropy(p)
    assert 0.0 <= e <= math.log2(256)
    m = glcm(p)
    np.testing.assert_array_equal(m, m.T)
    assert abs(m.sum() - 1.0) < 1e-9
    h = homogeneity(m)
    assert 0.0 < h <= 1.0
    assert (h == 1.0) == (np.trace(m) == m.sum())


@given(patches, st.integers(0, 2 ** 31 - 1))
def test_entropy_permutation_invariant(p, seed):
    shuffled = np.random.default_rng(seed).permutation(p.ravel()).reshape(p.shape)
    assert shannon_entropy(shuffled) == shannon_entropy(p)


def test_homogeneity_sees_texture():
    stripes = np.zeros((8, 8))
    stripes[:, 4:] = 1.0
    shuffled = np.random.default_rng(1).permutation(stripes.ravel()).reshape(8, 8)
    assert shannon_entropy(stripes) == shannon_entropy(shuffled)
    assert homogeneity(glcm(stripes, 2)) > homogeneity(glcm(shuffled, 2))


def test_grayscale_is_rgb_mean():
    bands = np.stack([np.full((2, 2), v) for v in (0.1, 0.2, 0.6, 0.9)])
    np.testing.assert_allclose(grayscale(bands), 0.3)


@pytest.fixture(scope="module")
def textures(tmp_path_factory):
    root = tmp_path_factory.mktemp("tex")
    return texture_manifest(root, "flat", "constant"), texture_manifest(root, "noisy", "noise", seed=1)


def test_area_report_orderings(textures):
    rows, summary = area_report(list(textures))
    flat, noisy = summary["flat"], summary["noisy"]
    assert flat["entropy_var"] == 0.0 and flat["homogeneity_var"] == 0.0
    assert noisy["entropy_mean"] > flat["entropy_mean"]
    assert flat["homogeneity_mean"] > noisy["homogeneity_mean"]
    for area, s in summary.items():
        mine = [r for r in rows if r.area == area]
        assert s["n"] == len(mine) == len(textures[0 if area == "flat" else 1].records)
        assert abs(s["entropy_mean"] - np.mean([r.entropy for r in mine])) < 1e-12
        assert abs(s["homogeneity_mean"] - np.mean([r.homogeneity for r in mine])) < 1e-12


def test_area_report_base_only(textures):
    rows, _ = area_report(textures[0], base_only=True)
    assert len(rows) == sum(r.angle == 0 for r in textures[0].records)


def test_area_report_missing_bands(textures):
    with pytest.raises(ValueError, match="need bands"):
        area_report(textures[0], rgb=(0, 1, 7))


def test_write_report(tmp_path):
    rows = [ComplexityRow(0, "A", 1.5, 0.8), ComplexityRow(1, "A", 2.5, 0.6), ComplexityRow(0, "B", 7.9, 0.1)]
    summary = summarize(rows)
    assert summary["A"]["entropy_var"] == 0.25 and summary["A"]["n"] == 2
    write_report(rows, summary, tmp_path / "c.csv")
    with open(tmp_path / "c.csv") as fh:
        back = list(csv.DictReader(fh))
    assert [float(r["entropy"]) for r in back] == [1.5, 2.5, 7.9]
    assert json.loads((tmp_path / "summary.json").read_text()) == summary
    with open(tmp_path / "histogram.csv") as fh:
        hist = list(csv.DictReader(fh))
    assert len(hist) == 2 * 2 * 20
    assert sum(int(r["count"]) for r in hist if r["metric"] == "entropy" and r["area"] == "A") == 2


def test_histogram_table_counts():
    rows = [ComplexityRow(i, "A", 0.4 * i, 0.05 * i) for i in range(20)]
    table = histogram_table(rows, bins=4)
    ent = [r["count"] for r in table if r["metric"] == "entropy"]
    assert ent == [5, 5, 5, 5]
