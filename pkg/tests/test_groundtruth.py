import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sartol.errors import DataError
from sartol.groundtruth import (
    Road,
    RoadVectorSet,
    euclidean_distance_transform,
    format_roads,
    make_tolerant,
    parse_roads,
    rasterize_roads,
    read_mask_pgm,
    read_roads,
    read_unit_pgm,
    squared_distance_transform,
    write_mask_pgm,
    write_roads,
    write_unit_pgm,
)


def brute_sq_dist(mask):
    """Squared distance to the nearest True pixel by exhaustive search."""
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    out = np.full((h, w), -1, dtype=np.int64)
    if len(ys) == 0:
        return out
    for r in range(h):
        for c in range(w):
            out[r, c] = int(((ys - r) ** 2 + (xs - c) ** 2).min())
    return out


def brute_raster(roads):
    h, w = roads.shape
    mask = np.zeros((h, w), dtype=bool)
    for road in roads.roads:
        r = road.thickness / 2
        pts = road.points.tolist()
        for row in range(h):
            for col in range(w):
                best = math.inf
                for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
                    dx, dy = bx - ax, by - ay
                    L = dx * dx + dy * dy
                    u = 0.0 if L == 0 else min(1.0, max(0.0, ((col - ax) * dx + (row - ay) * dy) / L))
                    best = min(best, (col - ax - u * dx) ** 2 + (row - ay - u * dy) ** 2)
                if best <= r * r:
                    mask[row, col] = True
    return mask


def test_horizontal_road_band():
    roads = RoadVectorSet(20, 11, (Road("dirt", [[0.0, 5.0], [19.0, 5.0]]),))
    mask = rasterize_roads(roads)
    assert mask[4:7].all() and not mask[:4].any() and not mask[7:].any()


def test_single_point_road_is_disc():
    roads = RoadVectorSet(15, 15, (Road("major", [[7.0, 7.0], [7.0, 7.0]]),))
    mask = rasterize_roads(roads)
    rr, cc = np.indices(mask.shape)
    assert np.array_equal(mask, (rr - 7) ** 2 + (cc - 7) ** 2 <= 3.5**2)


def test_rasterization_matches_point_segment_oracle():
    rs = np.random.default_rng(11)
    for _ in range(5):
        roads = []
        for cls in ("major", "country", "dirt"):
            pts = rs.uniform(-3, 27, size=(4, 2))
            roads.append(Road(cls, pts))
        rv = RoadVectorSet(24, 20, tuple(roads))
        assert np.array_equal(rasterize_roads(rv), brute_raster(rv))


def test_unknown_class_rejected():
    with pytest.raises(DataError, match="gravel"):
        Road("gravel", [[0, 0], [1, 1]])


def test_vertices_beyond_margin_rejected():
    with pytest.raises(DataError):
        RoadVectorSet(10, 10, (Road("dirt", [[0, 0], [40, 0]]),))


def test_road_text_roundtrip(tmp_path):
    rv = RoadVectorSet(64, 32, (
        Road("major", [[0.1, 0.2], [10.123456789, 5.5]]),
        Road("dirt", [[-3.0, 1.0], [66.0, 30.0], [12.0, 12.0]]),
    ))
    text = format_roads(rv)
    assert parse_roads(text) == rv
    write_roads(rv, tmp_path / "r.txt")
    back = read_roads(tmp_path / "r.txt")
    assert format_roads(back) == text
    assert back.roads == rv.roads


def test_road_file_errors():
    with pytest.raises(DataError, match="canvas"):
        parse_roads("dirt 0,0 1,1\n")
    with pytest.raises(DataError, match="line 2"):
        parse_roads("# canvas 5 5\ndirt 0,0 a,1\n")
    assert parse_roads("dirt 0,0 1,1\n", canvas=(5, 5)).shape == (5, 5)


def test_empty_mask_conventions():
    z = np.zeros((4, 5), dtype=bool)
    assert (squared_distance_transform(z) == -1).all()
    assert np.isinf(euclidean_distance_transform(z)).all()
    gt = make_tolerant(z, 4)
    assert (gt.y_tol == 0).all()


def test_full_mask_is_zero_distance():
    assert (squared_distance_transform(np.ones((3, 3), bool)) == 0).all()


def test_edt_small_example():
    m = np.zeros((1, 5), dtype=bool)
    m[0, 0] = True
    assert squared_distance_transform(m).tolist() == [[0, 1, 4, 9, 16]]


@settings(max_examples=60, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 14), st.integers(1, 14))))
def test_edt_matches_brute_force(mask):
    assert np.array_equal(squared_distance_transform(mask), brute_sq_dist(mask))


def test_tolerance_worked_values():
    m = np.zeros((1, 7), dtype=bool)
    m[0, 0] = True
    y = make_tolerant(m, 2).y_tol[0]
    assert y.tolist() == [1.0, 1 - 1 / 3, 1 - 2 / 3, 0.0, 0.0, 0.0, 0.0]


def test_tolerance_diagonal_uses_euclidean_distance():
    m = np.zeros((3, 3), dtype=bool)
    m[0, 0] = True
    y = make_tolerant(m, 2).y_tol
    assert y[1, 1] == 1 - math.sqrt(2) / 3
    assert y[2, 2] == 0.0  # sqrt(8) > 2


def test_t_max_zero_is_binary():
    rs = np.random.default_rng(2)
    m = rs.random((20, 20)) < 0.1
    gt = make_tolerant(m, 0)
    assert np.array_equal(gt.y_tol, m.astype(float))


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (12, 12)), st.sampled_from([0, 1, 2, 4, 8]), st.integers(1, 3))
def test_tolerant_gt_commutes_with_rotation(mask, t_max, k):
    a = make_tolerant(np.rot90(mask, k), t_max).y_tol
    b = np.rot90(make_tolerant(mask, t_max).y_tol, k)
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (10, 10)), st.integers(0, 8))
def test_tolerance_range_and_support(mask, t_max):
    gt = make_tolerant(mask, t_max)
    assert gt.y_tol.min() >= 0 and gt.y_tol.max() <= 1
    assert (gt.y_tol[mask] == 1).all()
    if mask.any():
        d = euclidean_distance_transform(mask)
        assert ((gt.y_tol > 0) == (d <= t_max)).all()


def test_negative_t_max_rejected():
    with pytest.raises(ValueError):
        make_tolerant(np.zeros((2, 2), bool), -1)


def test_unit_and_mask_pgm_roundtrip(tmp_path):
    v = np.array([[0.0, 0.25, 1.0]])
    write_unit_pgm(v, tmp_path / "u.pgm")
    assert (tmp_path / "u.pgm").read_bytes().startswith(b"P5 3 1 65535\n")
    assert np.abs(read_unit_pgm(tmp_path / "u.pgm") - v).max() <= 0.5 / 65535
    m = np.array([[True, False]])
    write_mask_pgm(m, tmp_path / "m.pgm")
    assert np.array_equal(read_mask_pgm(tmp_path / "m.pgm"), m)
