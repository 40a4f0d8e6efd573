import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from roadfuse.ingest import (
    GpsPoint, GridSpec, IngestError, RoadSegment, buffer_width_for_class, normalize_gps, parse_linestring,
    rasterize_gps, rasterize_labels, read_gps_csv, read_roads_csv, write_roads_csv,
)

from helpers import random_segments
from oracles import gps_count_loop, label_loop, percentile_sorted

SPEC = GridSpec(40, 40, 0.0, 100.0, 2.5)


# --------------------------------------------------------------------------- GPS


def test_three_points_one_cell():
    pts = [GpsPoint("a", 0, 1.0, 99.0), GpsPoint("a", 1, 2.0, 98.0), GpsPoint("b", 0, 0.0, 100.0)]
    grid, skipped = rasterize_gps(pts, SPEC)
    assert grid.data[0, 0] == 3 and grid.data.sum() == 3 and skipped == 0


def test_empty_stream():
    grid, skipped = rasterize_gps(iter(()), SPEC)
    assert not grid.data.any() and skipped == 0
    assert grid.shape == (40, 40)


def test_gps_matches_nested_loop_oracle(rng):
    spec = GridSpec(23, 17, 500.0, 2000.0, 2.5)
    xs = rng.uniform(490, 570, 5000)
    ys = rng.uniform(1950, 2010, 5000)
    # include exact cell boundaries
    xs[:50] = 500 + 2.5 * rng.integers(0, 23, 50)
    ys[:50] = 2000 - 2.5 * rng.integers(0, 17, 50)
    grid, skipped = rasterize_gps(zip(xs, ys), spec)
    expect, exp_skipped = gps_count_loop(xs, ys, 23, 17, 500.0, 2000.0, 2.5)
    assert np.array_equal(grid.data, expect) and skipped == exp_skipped


@given(st.lists(st.tuples(st.floats(-10, 110), st.floats(-10, 110)), max_size=60), st.randoms())
def test_gps_conservation_and_order_independence(pts, rnd):
    grid, skipped = rasterize_gps(pts, SPEC)
    assert grid.data.sum() + skipped == len(pts)
    shuffled = list(pts)
    rnd.shuffle(shuffled)
    assert rasterize_gps(shuffled, SPEC)[0] == grid


def test_normalize_gps_examples():
    g = SPEC.empty().with_data(np.zeros((40, 40)))
    assert not normalize_gps(g).data.any()
    small = GridSpec(4, 1, 0, 0, 1).empty().with_data(np.array([[0, 1, 2, 4]]))
    assert normalize_gps(small, 100).data.tolist() == [[0, 0.25, 0.5, 1]]


def test_normalize_gps_heavy_tail_oracle(rng):
    counts = np.floor(rng.pareto(1.2, size=(30, 30)) * 3)
    g = GridSpec(30, 30, 0, 0, 1).empty().with_data(counts)
    p = percentile_sorted(counts[counts > 0], 99)
    assert np.allclose(normalize_gps(g, 99).data, np.minimum(counts, p) / p, atol=1e-7)


def test_gps_csv(tmp_path):
    p = tmp_path / "pts.csv"
    p.write_text("traj_id,t,x,y\na,0,1.0,99.0\na,1.5,2.0,98.0\nb,2,oops,1\n")
    with pytest.raises(IngestError, match="line 4"):
        list(read_gps_csv(p))
    stats = {}
    pts = list(read_gps_csv(p, skip_bad=True, stats=stats))
    assert len(pts) == 2 and stats["bad"] == 1 and pts[1].t == 1.5
    (tmp_path / "h.csv").write_text("x,y\n1,2\n")
    with pytest.raises(IngestError):
        list(read_gps_csv(tmp_path / "h.csv"))


# --------------------------------------------------------------------------- roads


def test_buffer_widths():
    assert buffer_width_for_class("motorway") == 10
    assert buffer_width_for_class("primary") == 10
    assert buffer_width_for_class("secondary") == 10
    assert buffer_width_for_class("footway") == 4
    for c in ("track", "service", "steps", "bridleway", "track_grade1", "track_grade5"):
        assert buffer_width_for_class(c) == 4
    assert buffer_width_for_class("residential") == 6
    assert buffer_width_for_class("tertiary") == 6


def test_segment_invariants():
    with pytest.raises(ValueError):
        RoadSegment(((0, 0),), "motorway")
    with pytest.raises(ValueError):
        RoadSegment(((0, 0), (0, 1e-12), (1, 1)), "motorway")


def test_empty_labels():
    assert not rasterize_labels([], SPEC).data.any()


def test_horizontal_motorway_band():
    seg = RoadSegment(((-50.0, 50.0), (200.0, 50.0)), "motorway")
    lab = rasterize_labels([seg], SPEC).data
    centers_y = 100.0 - (np.arange(40) + 0.5) * 2.5
    rows = np.abs(centers_y - 50.0) <= 10.0
    assert np.array_equal(lab, np.repeat(rows[:, None], 40, axis=1).astype(np.float32))


def test_footway_band_strictly_inside_motorway():
    verts = ((3.0, 20.0), (60.0, 75.0), (97.0, 30.0))
    foot = rasterize_labels([RoadSegment(verts, "footway")], SPEC).data
    motor = rasterize_labels([RoadSegment(verts, "motorway")], SPEC).data
    assert np.all(foot <= motor) and motor.sum() > foot.sum()


def test_labels_match_distance_oracle(rng):
    for _ in range(5):
        segs = random_segments(rng, SPEC, int(rng.integers(1, 4)))
        expect = label_loop(segs, 40, 40, 0.0, 100.0, 2.5, buffer_width_for_class)
        assert np.array_equal(rasterize_labels(segs, SPEC).data, expect)


@given(st.integers(0, 2**31 - 1), st.floats(0.5, 8), st.floats(0.5, 8))
def test_labels_monotone_in_width(seed, w1, w2):
    lo, hi = sorted((w1, w2))
    segs = random_segments(np.random.default_rng(seed), SPEC, 2)
    a = rasterize_labels(segs, SPEC, width_fn=lambda c: lo).data
    b = rasterize_labels(segs, SPEC, width_fn=lambda c: hi).data
    assert np.all(a <= b)


def test_roads_csv_roundtrip(tmp_path, rng):
    segs = random_segments(rng, SPEC, 4)
    write_roads_csv(segs, tmp_path / "r.csv")
    back = read_roads_csv(tmp_path / "r.csv")
    assert back == segs


def test_roads_csv_errors(tmp_path):
    (tmp_path / "r.csv").write_text('fclass,wkt\nmotorway,"LINESTRING (0 0, 1 1)"\nfootway,POINT (1 2)\n')
    with pytest.raises(IngestError, match="line 3"):
        read_roads_csv(tmp_path / "r.csv")
    assert parse_linestring("LINESTRING (0 0, 1.5 -2)") == ((0.0, 0.0), (1.5, -2.0))


def test_grid_spec_json(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"width": 3, "height": 2, "origin_x": 1, "origin_y": 5}))
    s = GridSpec.from_json(tmp_path / "s.json")
    assert s == GridSpec(3, 2, 1.0, 5.0, 2.5)
