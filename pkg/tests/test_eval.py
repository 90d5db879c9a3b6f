import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sartol.errors import DataError
from sartol.eval import (
    CSV_HEADER,
    FN_COLOR,
    FP_COLOR,
    TN_COLOR,
    TP_COLOR,
    ConfusionCounts,
    binarize,
    confusion,
    decode_ppm,
    encode_ppm,
    format_sweep,
    iou_from_pr,
    metrics,
    overlay,
    parse_sweep,
    sweep_report,
)


def loop_confusion(pred, truth, valid):
    tp = fp = fn = tn = 0
    for p, t, v in zip(pred.ravel(), truth.ravel(), valid.ravel()):
        if not v:
            continue
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def test_binarize_threshold_is_inclusive():
    assert binarize(np.array(0.5), 0.5)
    assert not binarize(np.array(0.4999), 0.5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
def test_binarize_monotone(pred, t1, t2):
    lo, hi = sorted((t1, t2))
    assert (binarize(pred, hi) <= binarize(pred, lo)).all()


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (8, 8)), arrays(bool, (8, 8)), arrays(bool, (8, 8)))
def test_confusion_matches_pixel_loop(pred, truth, valid):
    if not valid.any():
        with pytest.raises(DataError):
            confusion(pred, truth, valid)
        return
    c = confusion(pred, truth, valid)
    assert c == loop_confusion(pred, truth, valid)
    assert c.total == valid.sum()


def test_undefined_ratios():
    r = metrics(ConfusionCounts(0, 0, 0, 10))
    assert r.iou is None and r.precision is None and r.recall is None
    assert r.accuracy == 1.0


def test_all_background_prediction():
    truth = np.zeros((20, 20), bool)
    truth[:1] = True
    r = metrics(confusion(np.zeros_like(truth), truth))
    assert r.accuracy == 0.95 and r.iou == 0.0 and r.recall == 0.0 and r.precision is None


def test_iou_from_rounded_percentages():
    assert abs(100 * iou_from_pr(0.7169, 0.5294) - 43.79) < 0.01


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10**6), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_iou_identity(tp, fp, fn, tn):
    r = metrics(ConfusionCounts(tp, fp, fn, tn))
    assert abs(r.iou - iou_from_pr(r.precision, r.recall)) < 1e-12
    assert r.iou <= min(r.precision, r.recall) + 1e-15


def test_overlay_colors_count_confusion_cells():
    rs = np.random.default_rng(0)
    pred, truth, valid = (rs.random((30, 40)) < f for f in (0.3, 0.2, 0.9))
    rgb = overlay(pred, truth, valid)
    c = confusion(pred, truth, valid)
    flat = rgb.reshape(-1, 3)
    count = {col: int((flat == col).all(axis=1).sum()) for col in (TP_COLOR, FP_COLOR, FN_COLOR, TN_COLOR)}
    assert (count[TP_COLOR], count[FP_COLOR], count[FN_COLOR], count[TN_COLOR]) == (c.tp, c.fp, c.fn, c.tn)
    assert int((flat == 0).all(axis=1).sum()) == (~valid).sum()


def test_ppm_roundtrip():
    rgb = np.random.default_rng(1).integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    data = encode_ppm(rgb)
    assert data.startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(decode_ppm(data), rgb)
    with pytest.raises(DataError):
        decode_ppm(b"P5\n1 1\n255\n\x00")


def test_empty_sweep_is_header_only():
    assert sweep_report([]) == ",".join(CSV_HEADER) + "\n"
    assert parse_sweep(sweep_report([])) == []


def test_sweep_rows_sorted_and_formatted():
    reports = [
        metrics(ConfusionCounts(1, 1, 0, 2), area="test", model="MiniFCN", t_max=8, **{"lambda": 1.0}),
        metrics(ConfusionCounts(2, 1, 1, 6), area="test", model="MiniFCN", t_max=2, **{"lambda": 4.0}),
        metrics(ConfusionCounts(0, 0, 0, 5), area="test", model="MiniFCN", t_max=2, **{"lambda": 1.0}),
    ]
    text = sweep_report(reports)
    lines = text.splitlines()
    assert lines[1] == "test,MiniFCN,2,1,undefined,undefined,undefined,100.00"
    assert lines[2] == "test,MiniFCN,2,4,50.00,66.67,66.67,80.00"
    assert lines[3] == "test,MiniFCN,8,1,50.00,50.00,100.00,75.00"
    assert format_sweep(parse_sweep(text)) == text


def test_sweep_parse_errors():
    with pytest.raises(DataError):
        parse_sweep("a,b\n")
    with pytest.raises(DataError):
        parse_sweep(",".join(CSV_HEADER) + "\n1,2\n")
