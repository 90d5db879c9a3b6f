"""In-memory orchestration shared by the CLI and the acceptance suite.

Scenes come from a synthesis manifest; ground truth is rebuilt from the
road vectors, tiled over the training region and fed to the trainer.
Held-out evaluation predicts whole scenes and scores the test region only.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autonet.model import ModelSpec, preset
from .autonet.train import TrainConfig, predict_full, train
from .dataset import (AreaSplit, PatchSet, Provenance, Region, SceneGrids, augment, extract_patches,
                      quantize_targets, split_area, write_patch_dir, ROTATION_TAGS, FLIP_TAGS,
                      augmentation_factor)
from .errors import DataError
from .eval import ConfusionCounts, MetricsReport, binarize, confusion, metrics
from .groundtruth import make_tolerant, rasterize_roads, read_mask_pgm, read_roads
from .raster import NormStats, compute_stats, normalize, read_pgm
from .synthscene import read_scene_manifest


@dataclass(frozen=True)
class SceneData:
    scene_id: str
    raw: np.ndarray  # uint16 image samples
    y_bin: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"file not found: {p}")
    return p


def load_scenes(manifest) -> list[SceneData]:
    entries, _ = read_scene_manifest(_require(manifest))
    if not entries:
        raise DataError(f"{manifest}: manifest lists no scenes")
    scenes = []
    for e in entries:
        image = read_pgm(_require(e["image"])).samples
        roads = read_roads(_require(e["roads"]))
        valid = read_mask_pgm(_require(e["valid"]))
        if roads.shape != image.shape or valid.shape != image.shape:
            raise DataError(f"scene {e['scene_id']}: image, roads and valid mask disagree in size")
        scenes.append(SceneData(e["scene_id"], image, rasterize_roads(roads), valid))
    return scenes


def scene_split(scene: SceneData, train_fraction: float) -> AreaSplit:
    return split_area(scene.shape[0], scene.shape[1], train_fraction)


def training_stats(scenes: list[SceneData], train_fraction: float) -> NormStats:
    """Image mean and std over the valid pixels of every training region."""
    crops = []
    for s in scenes:
        rows, cols = scene_split(s, train_fraction).train_region.slices
        crops.append(s.raw[rows, cols][s.valid[rows, cols]])
    return compute_stats(crops)


def _base_patches(scene: SceneData, region: Region, t_max: int, patch_size: int, stride: int,
                  stats: NormStats | None):
    gt = make_tolerant(scene.y_bin, t_max, scene.valid)
    image = scene.raw if stats is None else normalize(scene.raw, stats)
    grids = SceneGrids(scene.scene_id, image, quantize_targets(gt.y_tol), gt.y_bin, gt.valid)
    return extract_patches(grids, region, patch_size, stride)


def build_patches(scenes: list[SceneData], stats: NormStats, t_max: int, train_fraction: float = 0.8,
                  patch_size: int = 256, stride: int = 256, mode: str = "rotations") -> PatchSet:
    """Augmented training patches from the training region of every scene."""
    sets = []
    for s in scenes:
        region = scene_split(s, train_fraction).train_region
        sets.append(augment(_base_patches(s, region, t_max, patch_size, stride, stats), mode))
    return PatchSet.concat(sets)


def write_patches(scenes: list[SceneData], stats: NormStats, t_max: int, out_dir, train_fraction: float = 0.8,
                  patch_size: int = 256, stride: int = 256, mode: str = "rotations") -> Path:
    """Same patches as :func:`build_patches`, materialized as a patch directory."""
    factor = augmentation_factor(mode)
    tags = (ROTATION_TAGS + FLIP_TAGS)[:factor] if mode != "none" else ("r0",)
    raw = []
    for s in scenes:
        region = scene_split(s, train_fraction).train_region
        base = _base_patches(s, region, t_max, patch_size, stride, None)
        for i, prov in enumerate(base.provenance):
            raw.append((Provenance(prov.scene_id, prov.x, prov.y), base.images[i].astype(np.uint16),
                        base.y_tol[i], base.y_bin[i], base.valid[i]))
    return write_patch_dir(raw, stats, tags, patch_size, out_dir, meta={"t_max": t_max, "mode": mode})


def fit(patches: PatchSet, config: TrainConfig, model: str | ModelSpec = "MiniFCN", progress=None):
    spec = preset(model) if isinstance(model, str) else model
    params, history = train(spec, patches, config, progress=progress)
    return spec, params, history


def predict_scene(spec: ModelSpec, params, scene: SceneData, stats: NormStats, tile: int = 256,
                  overlap: int = 32) -> np.ndarray:
    return predict_full(spec, params, normalize(scene.raw, stats), tile, overlap)


def evaluate_heldout(spec: ModelSpec, params, scenes: list[SceneData], stats: NormStats,
                     train_fraction: float = 0.8, threshold: float = 0.5, tile: int = 256,
                     overlap: int = 32, **labels) -> MetricsReport:
    """Confusion counts summed over the test regions of all scenes."""
    total = ConfusionCounts(0, 0, 0, 0)
    for s in scenes:
        pred = binarize(predict_scene(spec, params, s, stats, tile, overlap), threshold)
        rows, cols = scene_split(s, train_fraction).test_region.slices
        total = total + confusion(pred[rows, cols], s.y_bin[rows, cols], s.valid[rows, cols])
    return metrics(total, area="test", **labels)
