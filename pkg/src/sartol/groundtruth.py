"""Road vectors to binary masks, exact Euclidean distances and tolerant targets.

Pixel ``(row, col)`` has its center at coordinates ``x = col``, ``y = row``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError
from .raster import Raster, read_pgm, write_pgm

THICKNESS = {"major": 7, "country": 5, "dirt": 3}
ROAD_CLASSES = tuple(THICKNESS)
MARGIN = max(THICKNESS.values())

FIXED_POINT = 65535


@dataclass(frozen=True)
class Road:
    cls: str
    points: np.ndarray  # (n, 2) array of (x, y)

    def __post_init__(self):
        if self.cls not in THICKNESS:
            raise DataError(f"unknown road class {self.cls!r}; expected one of {ROAD_CLASSES}")
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise DataError("a polyline needs at least two (x, y) vertices")
        if not np.isfinite(pts).all():
            raise DataError("polyline vertices must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def thickness(self) -> int:
        return THICKNESS[self.cls]

    def __eq__(self, other):
        if not isinstance(other, Road):
            return NotImplemented
        return self.cls == other.cls and np.array_equal(self.points, other.points)

    __hash__ = None


@dataclass(frozen=True)
class RoadVectorSet:
    canvas_width: int
    canvas_height: int
    roads: tuple[Road, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "roads", tuple(self.roads))
        if self.canvas_width < 1 or self.canvas_height < 1:
            raise DataError("canvas dimensions must be positive")
        for road in self.roads:
            x, y = road.points[:, 0], road.points[:, 1]
            if (x.min() < -MARGIN or y.min() < -MARGIN
                    or x.max() > self.canvas_width + MARGIN
                    or y.max() > self.canvas_height + MARGIN):
                raise DataError(f"{road.cls} road has vertices beyond the canvas margin")

    @property
    def shape(self) -> tuple[int, int]:
        return self.canvas_height, self.canvas_width

    def of_class(self, cls: str) -> "RoadVectorSet":
        return RoadVectorSet(self.canvas_width, self.canvas_height,
                             tuple(r for r in self.roads if r.cls == cls))


# ---------------------------------------------------------------------------
# Text serialization: "# canvas W H" header, then "class x0,y0 x1,y1 ..." lines
# ---------------------------------------------------------------------------


def format_roads(roads: RoadVectorSet) -> str:
    lines = [f"# canvas {roads.canvas_width} {roads.canvas_height}"]
    for road in roads.roads:
        coords = " ".join(f"{x!r},{y!r}" for x, y in road.points.tolist())
        lines.append(f"{road.cls} {coords}")
    return "\n".join(lines) + "\n"


def parse_roads(text: str, canvas: tuple[int, int] | None = None) -> RoadVectorSet:
    """Parse the line format; ``canvas=(width, height)`` overrides the header."""
    width = height = None
    roads = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 3 and parts[0] == "canvas":
                width, height = int(parts[1]), int(parts[2])
            continue
        cls, *coords = line.split()
        try:
            pts = [tuple(float(v) for v in c.split(",")) for c in coords]
        except ValueError:
            raise DataError(f"line {lineno}: bad coordinate in {line!r}") from None
        if any(len(p) != 2 for p in pts):
            raise DataError(f"line {lineno}: coordinates must be x,y pairs")
        try:
            roads.append(Road(cls, np.array(pts).reshape(-1, 2)))
        except DataError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    if canvas is not None:
        width, height = canvas
    if width is None:
        raise DataError("road file has no '# canvas W H' header and no canvas was given")
    return RoadVectorSet(width, height, tuple(roads))


def read_roads(path: str | os.PathLike, canvas: tuple[int, int] | None = None) -> RoadVectorSet:
    with open(path, encoding="ascii") as fh:
        text = fh.read()
    try:
        return parse_roads(text, canvas)
    except DataError as exc:
        raise DataError(f"{os.fspath(path)}: {exc}") from None


def write_roads(roads: RoadVectorSet, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(format_roads(roads))


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------


def draw_polyline(mask: np.ndarray, points: np.ndarray, thickness: float) -> np.ndarray:
    """Set every pixel whose center lies within ``thickness / 2`` of the polyline."""
    h, w = mask.shape
    r = thickness / 2.0
    r2 = r * r
    for (ax, ay), (bx, by) in zip(points[:-1], points[1:]):
        x0 = max(int(math.floor(min(ax, bx) - r)), 0)
        x1 = min(int(math.ceil(max(ax, bx) + r)), w - 1)
        y0 = max(int(math.floor(min(ay, by) - r)), 0)
        y1 = min(int(math.ceil(max(ay, by) + r)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        px = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
        py = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
        mask[y0 : y1 + 1, x0 : x1 + 1] |= segment_dist2(px, py, ax, ay, bx, by) <= r2
    return mask


def segment_dist2(px, py, ax, ay, bx, by):
    """Squared distance from points ``(px, py)`` to segment ``a-b``."""
    dx, dy = bx - ax, by - ay
    len2 = dx * dx + dy * dy
    if len2 == 0.0:
        u = 0.0
    else:
        u = np.clip(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0)
    cx = ax + u * dx
    cy = ay + u * dy
    return (px - cx) ** 2 + (py - cy) ** 2


def rasterize_roads(roads: RoadVectorSet) -> np.ndarray:
    mask = np.zeros(roads.shape, dtype=bool)
    for road in roads.roads:
        draw_polyline(mask, road.points, road.thickness)
    return mask


# ---------------------------------------------------------------------------
# Distance transform
# ---------------------------------------------------------------------------


def squared_distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (int64) to the nearest ``True`` pixel.

    Returns ``-1`` everywhere when the mask has no ``True`` pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, -1, dtype=np.int64)
    # the indices of the nearest feature are exact; the distance is rebuilt
    # from them in integer arithmetic
    iy, ix = ndimage.distance_transform_edt(~mask, return_distances=False, return_indices=True)
    rows, cols = np.indices(mask.shape)
    return (iy - rows).astype(np.int64) ** 2 + (ix - cols).astype(np.int64) ** 2


def euclidean_distance_transform(mask: np.ndarray) -> np.ndarray:
    """Distance from each pixel center to the nearest road pixel center.

    An all-background mask yields ``inf`` everywhere.
    """
    sq = squared_distance_transform(mask)
    if sq.size and sq.flat[0] < 0:
        return np.full(sq.shape, np.inf)
    return np.sqrt(sq.astype(np.float64))


# ---------------------------------------------------------------------------
# Tolerant ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TolerantGroundTruth:
    t_max: int
    y_tol: np.ndarray
    y_bin: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.y_bin.shape


def tolerance_values(sq_dist: np.ndarray, t_max: int) -> np.ndarray:
    """``1 - t / (t_max + 1)`` inside the band ``t <= t_max``, else 0."""
    t = np.sqrt(np.maximum(sq_dist, 0).astype(np.float64))
    inside = (sq_dist >= 0) & (sq_dist <= t_max * t_max)
    return np.where(inside, 1.0 - t / (t_max + 1), 0.0)


def make_tolerant(mask: np.ndarray, t_max: int, valid: np.ndarray | None = None) -> TolerantGroundTruth:
    mask = np.asarray(mask, dtype=bool)
    if int(t_max) != t_max or t_max < 0:
        raise ValueError(f"t_max must be a non-negative integer, got {t_max}")
    t_max = int(t_max)
    if valid is None:
        valid = np.ones_like(mask)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != mask.shape:
        raise ValueError(f"valid mask shape {valid.shape} != road mask shape {mask.shape}")
    y_tol = tolerance_values(squared_distance_transform(mask), t_max)
    y_tol[mask] = 1.0
    return TolerantGroundTruth(t_max, y_tol, mask, valid)


# ---------------------------------------------------------------------------
# Fixed-point storage
# ---------------------------------------------------------------------------


def to_fixed_point(values: np.ndarray) -> np.ndarray:
    """Unit-interval reals to ``uint16`` via ``round(v * 65535)``."""
    return np.rint(np.clip(values, 0.0, 1.0) * FIXED_POINT).astype(np.uint16)


def from_fixed_point(samples: np.ndarray) -> np.ndarray:
    return np.asarray(samples, dtype=np.float64) / FIXED_POINT


def write_unit_pgm(values: np.ndarray, path) -> None:
    write_pgm(Raster(to_fixed_point(values)), path, maxval=FIXED_POINT)


def read_unit_pgm(path) -> np.ndarray:
    return from_fixed_point(read_pgm(path).samples)


def write_mask_pgm(mask: np.ndarray, path) -> None:
    write_pgm(Raster(np.where(mask, 255, 0).astype(np.uint16)), path, maxval=255)


def read_mask_pgm(path) -> np.ndarray:
    return read_pgm(path).samples > 0
