"""Deterministic SAR-like scenes with known road vectors.

A scene is a smooth background reflectivity modulated by dark roads with
bright embankment rims, plus distractors that must not be labelled as
roads: wide dark rivers and thin bright hedges.  Multiplicative Gamma
speckle turns the reflectivity into the observed 16-bit image.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .groundtruth import (
    MARGIN,
    Road,
    RoadVectorSet,
    draw_polyline,
    rasterize_roads,
    squared_distance_transform,
    write_mask_pgm,
    write_roads,
)
from .raster import MAX_SAMPLE, Raster, write_pgm
from .rng import SplitMix64

# image sample = reflectivity * speckle * SPECKLE_SCALE
SPECKLE_SCALE = 2048.0

RIM_WIDTH = 2.0
RIVER_FACTOR = 0.08
HEDGE_FACTOR = 2.5
RIVER_WIDTH = (11.0, 17.0)
HEDGE_WIDTH = (1.0, 2.0)
HEDGE_LENGTH = (100.0, 300.0)
# distractors keep this distance (px) from every road pixel
DISTRACTOR_GAP = 4.0


@dataclass(frozen=True)
class SceneConfig:
    width: int = 1024
    height: int = 1024
    n_major: int = 2
    n_country: int = 3
    n_dirt: int = 4
    n_rivers: int = 1
    n_hedges: int = 4
    looks: int = 1
    contrast: float = 0.25
    embankment_gain: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 128 or self.height < 128:
            raise ConfigError("scene width and height must be >= 128")
        if self.looks < 1:
            raise ConfigError("looks must be >= 1")
        if not 0.0 < self.contrast < 1.0:
            raise ConfigError("contrast must lie in (0, 1)")
        if self.embankment_gain < 1.0:
            raise ConfigError("embankment_gain must be >= 1")
        for name in ("n_major", "n_country", "n_dirt", "n_rivers", "n_hedges"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass(frozen=True)
class Scene:
    image: Raster
    roads: RoadVectorSet
    valid: np.ndarray
    reflectivity: np.ndarray
    rivers: np.ndarray
    hedges: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def value_noise(rng: SplitMix64, height: int, width: int, cell: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [-1, 1]."""
    gh = height // cell + 2
    gw = width // cell + 2
    lattice = rng.uniform(gh * gw).reshape(gh, gw) * 2.0 - 1.0
    y = np.arange(height) / cell
    x = np.arange(width) / cell
    y0 = y.astype(int)
    x0 = x.astype(int)
    ty = y - y0
    tx = x - x0
    sy = (ty * ty * (3 - 2 * ty))[:, None]
    sx = (tx * tx * (3 - 2 * tx))[None, :]
    a = lattice[np.ix_(y0, x0)]
    b = lattice[np.ix_(y0, x0 + 1)]
    c = lattice[np.ix_(y0 + 1, x0)]
    d = lattice[np.ix_(y0 + 1, x0 + 1)]
    top = a + (b - a) * sx
    bottom = c + (d - c) * sx
    return top + (bottom - top) * sy


def background(rng: SplitMix64, height: int, width: int) -> np.ndarray:
    field = 1.0 + 0.35 * value_noise(rng, height, width, 128) + 0.15 * value_noise(rng, height, width, 32)
    return np.maximum(field, 0.2)


def _clip_to_box(p, q, lo_x, lo_y, hi_x, hi_y):
    """Point where segment p->q leaves the box (p inside, q outside)."""
    t = 1.0
    for a, b, lo, hi in ((p[0], q[0], lo_x, hi_x), (p[1], q[1], lo_y, hi_y)):
        if b < lo:
            t = min(t, (lo - a) / (b - a))
        elif b > hi:
            t = min(t, (hi - a) / (b - a))
    x = min(max(p[0] + t * (q[0] - p[0]), lo_x), hi_x)
    y = min(max(p[1] + t * (q[1] - p[1]), lo_y), hi_y)
    return x, y


def crossing_walk(rng: SplitMix64, width: int, height: int, step: float, turn_sigma: float,
                  persistence: float = 0.85, max_dev: float = math.pi / 3) -> np.ndarray:
    """Smoothed random walk entering at one edge and leaving the canvas.

    The heading's deviation from the entry direction is bounded so the
    walk crosses the canvas instead of curling up.
    """
    side = rng.integers(0, 4)
    along = rng.uniform()
    if side == 0:
        x, y, base = along * width, 0.0, math.pi / 2
    elif side == 1:
        x, y, base = along * width, float(height), -math.pi / 2
    elif side == 2:
        x, y, base = 0.0, along * height, 0.0
    else:
        x, y, base = float(width), along * height, math.pi
    heading = base + (rng.uniform() - 0.5) * (math.pi / 2)
    lo_x, lo_y, hi_x, hi_y = -MARGIN, -MARGIN, width + MARGIN, height + MARGIN
    pts = [(x, y)]
    curvature = 0.0
    max_steps = int(4 * (width + height) / step)
    for _ in range(max_steps):
        curvature = persistence * curvature + turn_sigma * rng.normal()
        heading = base + float(np.clip(heading + curvature - base, -max_dev, max_dev))
        nx, ny = x + step * math.cos(heading), y + step * math.sin(heading)
        if not (lo_x <= nx <= hi_x and lo_y <= ny <= hi_y):
            pts.append(_clip_to_box((x, y), (nx, ny), lo_x, lo_y, hi_x, hi_y))
            break
        x, y = nx, ny
        pts.append((x, y))
    return np.array(pts)


def short_walk(rng: SplitMix64, width: int, height: int, length: float, step: float,
               turn_sigma: float) -> np.ndarray:
    x = rng.uniform() * width
    y = rng.uniform() * height
    heading = rng.uniform() * 2 * math.pi
    pts = [(x, y)]
    curvature = 0.0
    for _ in range(max(1, int(length / step))):
        curvature = 0.8 * curvature + turn_sigma * rng.normal()
        heading += curvature
        x = float(np.clip(x + step * math.cos(heading), 0, width - 1))
        y = float(np.clip(y + step * math.sin(heading), 0, height - 1))
        pts.append((x, y))
    return np.array(pts)


# ---------------------------------------------------------------------------
# Speckle
# ---------------------------------------------------------------------------


def add_speckle(reflectivity: np.ndarray, looks: int, seed: int) -> Raster:
    """Multiply by unit-mean Gamma(looks, 1/looks) speckle and quantize.

    Samples are ``round(reflectivity * s * SPECKLE_SCALE)`` clipped to the
    16-bit range; ``s`` is drawn per pixel in row-major order.
    """
    refl = np.asarray(reflectivity, dtype=np.float64)
    if not np.isfinite(refl).all() or (refl <= 0).any():
        raise ValueError("reflectivity must be finite and strictly positive")
    if looks < 1:
        raise ValueError("looks must be >= 1")
    s = SplitMix64(seed).gamma(float(looks), refl.size).reshape(refl.shape) / looks
    samples = np.clip(np.rint(refl * s * SPECKLE_SCALE), 0, MAX_SAMPLE)
    return Raster(samples.astype(np.uint16))


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


_WALK = {
    # step, turn sigma
    "major": (16.0, 0.02),
    "country": (12.0, 0.04),
    "dirt": (10.0, 0.07),
}


def generate_scene(config: SceneConfig) -> Scene:
    root = SplitMix64(config.seed)
    h, w = config.height, config.width

    road_rng = root.spawn(2)
    roads = []
    for cls, count in (("major", config.n_major), ("country", config.n_country), ("dirt", config.n_dirt)):
        step, sigma = _WALK[cls]
        for _ in range(count):
            roads.append(Road(cls, crossing_walk(road_rng, w, h, step, sigma)))
    vectors = RoadVectorSet(w, h, tuple(roads))
    road_mask = rasterize_roads(vectors)
    if road_mask.any():
        dist2 = squared_distance_transform(road_mask)
    else:
        dist2 = np.full((h, w), np.iinfo(np.int64).max)
    rim = (dist2 > 0) & (dist2 <= RIM_WIDTH**2)
    clear = dist2 > DISTRACTOR_GAP**2

    river_rng = root.spawn(3)
    rivers = np.zeros((h, w), dtype=bool)
    for _ in range(config.n_rivers):
        width = RIVER_WIDTH[0] + (RIVER_WIDTH[1] - RIVER_WIDTH[0]) * river_rng.uniform()
        draw_polyline(rivers, crossing_walk(river_rng, w, h, 24.0, 0.015), width)
    rivers &= clear

    hedge_rng = root.spawn(4)
    hedges = np.zeros((h, w), dtype=bool)
    for _ in range(config.n_hedges):
        length = HEDGE_LENGTH[0] + (HEDGE_LENGTH[1] - HEDGE_LENGTH[0]) * hedge_rng.uniform()
        width = HEDGE_WIDTH[0] + (HEDGE_WIDTH[1] - HEDGE_WIDTH[0]) * hedge_rng.uniform()
        draw_polyline(hedges, short_walk(hedge_rng, w, h, length, 8.0, 0.05), width)
    hedges &= clear & ~rivers

    refl = background(root.spawn(1), h, w)
    refl[road_mask] *= config.contrast
    refl[rim] *= config.embankment_gain
    refl[rivers] *= RIVER_FACTOR
    refl[hedges] *= HEDGE_FACTOR

    image = add_speckle(refl, config.looks, root.spawn(5).seed)
    valid = np.ones((h, w), dtype=bool)
    return Scene(image, vectors, valid, refl, rivers, hedges)


def generate_dataset(config: SceneConfig, n_scenes: int, out_dir: str | os.PathLike) -> list[dict]:
    """Write ``n_scenes`` scenes and ``manifest.txt`` into ``out_dir``.

    Scene ``i`` uses seed ``config.seed + i``.  Manifest lines read
    ``scene_id image_path roads_path valid_path seed`` with paths relative
    to the manifest; a leading comment records the scene config.
    """
    if n_scenes < 0:
        raise ConfigError("n_scenes must be >= 0")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_scenes):
        cfg = SceneConfig(**{**asdict(config), "seed": config.seed + i})
        scene = generate_scene(cfg)
        sid = f"scene_{i:04d}"
        entry = {
            "scene_id": sid,
            "image": f"{sid}.pgm",
            "roads": f"{sid}_roads.txt",
            "valid": f"{sid}_valid.pgm",
            "seed": cfg.seed,
        }
        write_pgm(scene.image, out / entry["image"])
        write_roads(scene.roads, out / entry["roads"])
        write_mask_pgm(scene.valid, out / entry["valid"])
        entries.append(entry)
    write_scene_manifest(entries, config, out / "manifest.txt")
    return entries


def write_scene_manifest(entries: list[dict], config: SceneConfig, path: Path) -> None:
    lines = ["# config " + json.dumps(asdict(config), sort_keys=True)]
    for e in entries:
        lines.append(f"{e['scene_id']} {e['image']} {e['roads']} {e['valid']} {e['seed']}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def read_scene_manifest(path: str | os.PathLike) -> tuple[list[dict], dict | None]:
    """Entries with paths resolved against the manifest directory."""
    path = Path(path)
    base = path.parent
    entries = []
    config = None
    for line in path.read_text(encoding="ascii").splitlines():
        if line.startswith("# config "):
            config = json.loads(line[len("# config "):])
            continue
        if not line.strip() or line.startswith("#"):
            continue
        sid, image, roads, valid, seed = line.split()
        entries.append({
            "scene_id": sid,
            "image": base / image,
            "roads": base / roads,
            "valid": base / valid,
            "seed": int(seed),
        })
    return entries, config
