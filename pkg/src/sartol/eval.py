"""Thresholded evaluation: confusion counts, ratio metrics, overlays and sweep tables."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

UNDEFINED = "undefined"
CSV_HEADER = ("area", "model", "t_max", "lambda", "iou", "precision", "recall", "accuracy")

TP_COLOR = (0, 255, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 0, 255)
TN_COLOR = (64, 64, 64)
INVALID_COLOR = (0, 0, 0)


def binarize(prediction: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Road where ``prediction >= threshold``."""
    return np.asarray(prediction) >= threshold


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _aligned(*arrays):
    arrays = [np.asarray(a, dtype=bool) for a in arrays]
    if len({a.shape for a in arrays}) != 1:
        raise DataError(f"masks are not aligned: {[a.shape for a in arrays]}")
    return arrays


def confusion(pred: np.ndarray, truth: np.ndarray, valid: np.ndarray | None = None) -> ConfusionCounts:
    """Counts over valid pixels with roads as the positive class."""
    if valid is None:
        valid = np.ones(np.shape(truth), dtype=bool)
    pred, truth, valid = _aligned(pred, truth, valid)
    if not valid.any():
        raise DataError("evaluation needs at least one valid pixel")
    p, t = pred[valid], truth[valid]
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


@dataclass(frozen=True)
class MetricsReport:
    """Ratios are None when their denominator is zero."""

    counts: ConfusionCounts
    iou: float | None
    precision: float | None
    recall: float | None
    accuracy: float | None
    labels: dict = field(default_factory=dict)


def metrics(counts: ConfusionCounts, **labels) -> MetricsReport:
    c = counts
    return MetricsReport(
        counts=c,
        iou=_ratio(c.tp, c.tp + c.fp + c.fn),
        precision=_ratio(c.tp, c.tp + c.fp),
        recall=_ratio(c.tp, c.tp + c.fn),
        accuracy=_ratio(c.tp + c.tn, c.total),
        labels=dict(labels),
    )


def iou_from_pr(precision: float, recall: float) -> float:
    """IoU implied by precision and recall: ``PR / (P + R - PR)``."""
    return precision * recall / (precision + recall - precision * recall)


# ---------------------------------------------------------------------------
# Overlay
# ---------------------------------------------------------------------------


def overlay(pred: np.ndarray, truth: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """``(H, W, 3)`` uint8 image coloring each pixel by its confusion cell."""
    if valid is None:
        valid = np.ones(np.shape(truth), dtype=bool)
    pred, truth, valid = _aligned(pred, truth, valid)
    rgb = np.empty(pred.shape + (3,), dtype=np.uint8)
    rgb[...] = INVALID_COLOR
    for sel, color in (
        (pred & truth, TP_COLOR),
        (pred & ~truth, FP_COLOR),
        (~pred & truth, FN_COLOR),
        (~pred & ~truth, TN_COLOR),
    ):
        rgb[sel & valid] = color
    return rgb


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {rgb.shape}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise DataError("not a binary PPM (P6)")
    try:
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError:
        raise DataError("PPM header has a non-integer field") from None
    if maxval != 255:
        raise DataError(f"only 8-bit PPM is supported, got maxval {maxval}")
    payload = parts[4]
    if len(payload) < w * h * 3:
        raise DataError("PPM payload truncated")
    return np.frombuffer(payload[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(rgb: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_ppm(rgb))


# ---------------------------------------------------------------------------
# Sweep tables
# ---------------------------------------------------------------------------


def _pct(v: float | None) -> str:
    return UNDEFINED if v is None else f"{100.0 * v:.2f}"


def _label(v) -> str:
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


def report_row(r: MetricsReport) -> tuple[str, ...]:
    lab = r.labels
    return (
        _label(lab.get("area", "")),
        _label(lab.get("model", "")),
        _label(lab.get("t_max", "")),
        _label(lab.get("lambda", "")),
        _pct(r.iou),
        _pct(r.precision),
        _pct(r.recall),
        _pct(r.accuracy),
    )


def _sort_key(row: tuple[str, ...]):
    def num(s):
        try:
            return (0, float(s), s)
        except ValueError:
            return (1, 0.0, s)

    return (row[0], row[1], num(row[2]), num(row[3]))


def _render(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(sorted(rows, key=_sort_key))
    return buf.getvalue()


def sweep_report(results: list[MetricsReport]) -> str:
    """CSV with one row per report, percentages to two decimals, sorted by labels."""
    return _render(report_row(r) for r in results)


def parse_sweep(text: str) -> list[tuple[str, ...]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise DataError(f"sweep CSV must start with the header {','.join(CSV_HEADER)}")
    for row in rows[1:]:
        if len(row) != len(CSV_HEADER):
            raise DataError(f"sweep CSV row has {len(row)} fields: {row}")
    return [tuple(r) for r in rows[1:]]


def format_sweep(rows: list[tuple[str, ...]]) -> str:
    return _render(rows)
