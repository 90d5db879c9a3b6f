"""Area splitting, patch tiling, dihedral augmentation and epoch batching."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .groundtruth import from_fixed_point, read_mask_pgm, read_unit_pgm, to_fixed_point, write_mask_pgm, write_unit_pgm
from .raster import NormStats, Raster, normalize, read_pgm, write_pgm
from .rng import SplitMix64

ROTATION_TAGS = ("r0", "r90", "r180", "r270")
FLIP_TAGS = ("f0", "f90", "f180", "f270")
AUGMENT_MODES = ("none", "rotations", "rotations_and_flips")


@dataclass(frozen=True)
class Region:
    """Pixel rectangle ``rows [row0, row1) x cols [col0, col1)``."""

    row0: int
    row1: int
    col0: int
    col1: int

    @property
    def height(self) -> int:
        return self.row1 - self.row0

    @property
    def width(self) -> int:
        return self.col1 - self.col0

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.row0, self.row1), slice(self.col0, self.col1)

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.slices] = True
        return m


@dataclass(frozen=True)
class AreaSplit:
    train_region: Region
    test_region: Region


def split_area(height: int, width: int, train_fraction: float) -> AreaSplit:
    """Top ``train_fraction`` of the rows trains, the rest tests."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    cut = int(round(train_fraction * height))
    if cut <= 0 or cut >= height:
        raise ConfigError(
            f"train_fraction {train_fraction} on {height} rows leaves an empty "
            f"{'train' if cut <= 0 else 'test'} region"
        )
    return AreaSplit(Region(0, cut, 0, width), Region(cut, height, 0, width))


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Provenance:
    scene_id: str
    x: int
    y: int
    aug: str = "r0"

    def __str__(self):
        return f"{self.scene_id}@{self.x},{self.y}:{self.aug}"


@dataclass
class PatchSet:
    """Aligned square patches stacked along the first axis."""

    images: np.ndarray  # (n, p, p) float32, normalized
    y_tol: np.ndarray  # (n, p, p) float32
    y_bin: np.ndarray  # (n, p, p) bool
    valid: np.ndarray  # (n, p, p) bool
    provenance: list[Provenance] = field(default_factory=list)

    def __post_init__(self):
        shapes = {a.shape for a in (self.images, self.y_tol, self.y_bin, self.valid)}
        if len(shapes) != 1:
            raise DataError(f"patch grids are misaligned: {shapes}")
        shape = shapes.pop()
        if len(shape) != 3 or shape[1] != shape[2]:
            raise DataError(f"patches must be square, got {shape}")
        if len(self.provenance) != shape[0]:
            raise DataError("one provenance record per patch is required")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def patch_size(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx)
        return PatchSet(self.images[idx], self.y_tol[idx], self.y_bin[idx], self.valid[idx],
                        [self.provenance[i] for i in idx.tolist()])

    @classmethod
    def empty(cls, patch_size: int) -> "PatchSet":
        shape = (0, patch_size, patch_size)
        return cls(np.zeros(shape, np.float32), np.zeros(shape, np.float32),
                   np.zeros(shape, bool), np.zeros(shape, bool), [])

    @classmethod
    def concat(cls, sets: Sequence["PatchSet"]) -> "PatchSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            raise DataError("no patches to concatenate")
        return cls(
            np.concatenate([s.images for s in sets]),
            np.concatenate([s.y_tol for s in sets]),
            np.concatenate([s.y_bin for s in sets]),
            np.concatenate([s.valid for s in sets]),
            [p for s in sets for p in s.provenance],
        )


@dataclass(frozen=True)
class SceneGrids:
    """The four aligned full-scene grids a patch set is cut from."""

    scene_id: str
    image: np.ndarray  # normalized float
    y_tol: np.ndarray
    y_bin: np.ndarray
    valid: np.ndarray


def patch_offsets(height: int, width: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    """Top-left ``(x, y)`` offsets of full patches, row-major (x fastest)."""
    if patch_size < 1 or stride < 1:
        raise ConfigError("patch_size and stride must be positive")
    if height < patch_size or width < patch_size:
        raise DataError(f"region {width}x{height} smaller than patch size {patch_size}")
    ys = range(0, height - patch_size + 1, stride)
    xs = range(0, width - patch_size + 1, stride)
    return [(x, y) for y in ys for x in xs]


def patch_count(height: int, width: int, patch_size: int, stride: int, mode: str = "rotations") -> int:
    """Number of augmented patches, from index arithmetic alone."""
    if height < patch_size or width < patch_size:
        return 0
    rows = (height - patch_size) // stride + 1
    cols = (width - patch_size) // stride + 1
    return rows * cols * augmentation_factor(mode)


def augmentation_factor(mode: str) -> int:
    try:
        return {"none": 1, "rotations": 4, "rotations_and_flips": 8}[mode]
    except KeyError:
        raise ConfigError(f"unknown augmentation mode {mode!r}; expected one of {AUGMENT_MODES}") from None


def extract_patches(grids: SceneGrids, region: Region, patch_size: int, stride: int) -> PatchSet:
    """Tile ``region`` into full patches; all-invalid patches are dropped."""
    offsets = patch_offsets(region.height, region.width, patch_size, stride)
    keep = []
    for x, y in offsets:
        r, c = region.row0 + y, region.col0 + x
        if grids.valid[r : r + patch_size, c : c + patch_size].any():
            keep.append((x, y))
    if not keep:
        return PatchSet.empty(patch_size)

    def cut(a, dtype):
        return np.stack([a[region.row0 + y : region.row0 + y + patch_size,
                           region.col0 + x : region.col0 + x + patch_size] for x, y in keep]).astype(dtype)

    return PatchSet(
        cut(grids.image, np.float32),
        cut(grids.y_tol, np.float32),
        cut(grids.y_bin, bool),
        cut(grids.valid, bool),
        [Provenance(grids.scene_id, region.col0 + x, region.row0 + y) for x, y in keep],
    )


def apply_transform(a: np.ndarray, tag: str) -> np.ndarray:
    """Apply a dihedral element to the last two axes.

    ``rK`` rotates counter-clockwise by K degrees; ``fK`` mirrors left-right
    first, then rotates by K.
    """
    k = int(tag[1:]) // 90
    if tag[0] == "f":
        a = a[..., ::-1]
    elif tag[0] != "r":
        raise ValueError(f"bad transform tag {tag!r}")
    return np.rot90(a, k, axes=(-2, -1))


def augment(patches: PatchSet, mode: str = "rotations") -> PatchSet:
    """Expand every patch into its rotations (4) or full dihedral orbit (8).

    Entries come out grouped per source patch: the four rotations, then
    the mirrored rotations.
    """
    factor = augmentation_factor(mode)
    tags = (ROTATION_TAGS + FLIP_TAGS)[:factor] if mode != "none" else ("r0",)
    n, p = len(patches), patches.patch_size
    out = {}
    for name in ("images", "y_tol", "y_bin", "valid"):
        src = getattr(patches, name)
        dst = np.empty((n, factor, p, p), dtype=src.dtype)
        for j, tag in enumerate(tags):
            dst[:, j] = apply_transform(src, tag)
        out[name] = dst.reshape(n * factor, p, p)
    prov = [Provenance(pr.scene_id, pr.x, pr.y, tag) for pr in patches.provenance for tag in tags]
    return PatchSet(out["images"], out["y_tol"], out["y_bin"], out["valid"], prov)


# ---------------------------------------------------------------------------
# Class statistics and batching
# ---------------------------------------------------------------------------


def road_frequency(y_bin: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Road pixels over valid pixels."""
    y_bin = np.asarray(y_bin, dtype=bool)
    valid = np.ones_like(y_bin) if valid is None else np.asarray(valid, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DataError("road frequency needs at least one valid pixel")
    return int((y_bin & valid).sum()) / n_valid


def weight_interval(f_road: float) -> tuple[float, float]:
    """Admissible road loss weights ``[1, 1 / f_road]``; ``{1}`` without roads."""
    if f_road <= 0.0:
        return 1.0, 1.0
    return 1.0, max(1.0, 1.0 / f_road)


def epoch_iter(patches: PatchSet | int, batch_size: int, epoch_seed: int) -> Iterator[np.ndarray]:
    """Index batches over a seeded permutation; the last batch may be short."""
    n = patches if isinstance(patches, int) else len(patches)
    if n == 0:
        raise DataError("cannot iterate over an empty patch set")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    perm = SplitMix64(epoch_seed).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


# ---------------------------------------------------------------------------
# On-disk patch sets
# ---------------------------------------------------------------------------
#
# patches.txt:
#   # stats {"mean": ..., "std": ...}
#   # patch_size 256
#   # meta {"t_max": 4, ...}          (optional)
#   <entry> <image.pgm> <y_tol.pgm> <y_bin.pgm> <valid.pgm> <scene_id> <x> <y> <aug>
#
# Each base patch is stored once (raw 16-bit image samples, 16-bit fixed
# point target, 8-bit masks); augmented entries reference it with a tag.


def quantize_targets(y_tol: np.ndarray) -> np.ndarray:
    """Targets at the 16-bit fixed-point precision used on disk."""
    return from_fixed_point(to_fixed_point(y_tol)).astype(np.float32)


def write_patch_dir(raw: Sequence[tuple[Provenance, np.ndarray, np.ndarray, np.ndarray, np.ndarray]],
                    stats: NormStats, tags: Sequence[str], patch_size: int, out_dir,
                    meta: dict | None = None) -> Path:
    """Materialize base patches ``(prov, raw_image, y_tol, y_bin, valid)``.

    ``meta`` (for example the tolerance used for ``y_tol``) is kept in a
    ``# meta`` header line.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        "# stats " + json.dumps({"mean": stats.mean, "std": stats.std}),
        f"# patch_size {patch_size}",
    ]
    if meta:
        lines.append("# meta " + json.dumps(meta, sort_keys=True))
    entry = 0
    for i, (prov, image, y_tol, y_bin, valid) in enumerate(raw):
        stem = f"p{i:06d}"
        files = (f"{stem}_image.pgm", f"{stem}_ytol.pgm", f"{stem}_ybin.pgm", f"{stem}_valid.pgm")
        write_pgm(Raster(image), out / files[0], maxval=65535)
        write_unit_pgm(y_tol, out / files[1])
        write_mask_pgm(y_bin, out / files[2])
        write_mask_pgm(valid, out / files[3])
        for tag in tags:
            lines.append(f"{entry} {' '.join(files)} {prov.scene_id} {prov.x} {prov.y} {tag}")
            entry += 1
    path = out / "patches.txt"
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_patch_dir(manifest: str | os.PathLike) -> tuple[PatchSet, NormStats]:
    path = Path(manifest)
    if path.is_dir():
        path = path / "patches.txt"
    base = path.parent
    stats = None
    patch_size = None
    rows = []
    for line in path.read_text(encoding="ascii").splitlines():
        if line.startswith("# stats "):
            d = json.loads(line[len("# stats "):])
            stats = NormStats(d["mean"], d["std"])
        elif line.startswith("# patch_size "):
            patch_size = int(line.split()[2])
        elif line.strip() and not line.startswith("#"):
            rows.append(line.split())
    if stats is None or patch_size is None:
        raise DataError(f"{path}: missing '# stats' or '# patch_size' header")
    if not rows:
        return PatchSet.empty(patch_size), stats
    cache = {}
    images, y_tol, y_bin, valid, prov = [], [], [], [], []
    for _, fi, ft, fb, fv, sid, x, y, tag in rows:
        if fi not in cache:
            cache[fi] = (
                normalize(read_pgm(base / fi), stats).astype(np.float32),
                read_unit_pgm(base / ft).astype(np.float32),
                read_mask_pgm(base / fb),
                read_mask_pgm(base / fv),
            )
        grids = cache[fi]
        images.append(apply_transform(grids[0], tag))
        y_tol.append(apply_transform(grids[1], tag))
        y_bin.append(apply_transform(grids[2], tag))
        valid.append(apply_transform(grids[3], tag))
        prov.append(Provenance(sid, int(x), int(y), tag))
    return PatchSet(np.stack(images), np.stack(y_tol), np.stack(y_bin), np.stack(valid), prov), stats


def read_patch_meta(manifest: str | os.PathLike) -> dict:
    path = Path(manifest)
    if path.is_dir():
        path = path / "patches.txt"
    for line in path.read_text(encoding="ascii").splitlines():
        if line.startswith("# meta "):
            return json.loads(line[len("# meta "):])
    return {}
