"""Command-line entry point.

    sartol <synth|gt|tile|train|predict|eval|sweep> --config run.json [--override key=value ...]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Every command writes ``run_<command>.json`` next to its outputs with the
resolved config, the SHA-256 of every input file and the tool version.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import pipeline as P
from .autonet.checkpoint import load_checkpoint, save_checkpoint
from .autonet.model import preset
from .autonet.train import predict_full, train
from .config import RunConfig, load_config
from .dataset import read_patch_dir, read_patch_meta, road_frequency, split_area
from .errors import ConfigError, DataError, NumericError
from .eval import binarize, confusion, metrics, overlay, sweep_report, write_ppm
from .groundtruth import (make_tolerant, rasterize_roads, read_mask_pgm, read_roads, read_unit_pgm,
                          write_mask_pgm, write_unit_pgm)
from .raster import NormStats, normalize, read_pgm
from .synthscene import generate_dataset, read_scene_manifest

COMMANDS = ("synth", "gt", "tile", "train", "predict", "eval", "sweep")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class Run:
    """Resolved paths and input digests for one command invocation."""

    def __init__(self, command: str, config: RunConfig, base: Path):
        self.command = command
        self.config = config
        self.base = base
        self.out = self.resolve(config.paths.out)
        self.inputs: dict[str, str] = {}

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base / path

    def input(self, key: str) -> Path:
        value = getattr(self.config.paths, key)
        if value is None:
            raise ConfigError(f"paths.{key}: required by '{self.command}'")
        path = self.resolve(value)
        if not path.exists():
            raise DataError(f"paths.{key}: file not found: {path}")
        return path

    def digest(self, path: Path) -> None:
        try:
            name = os.path.relpath(path, self.base)
        except ValueError:
            name = str(path)
        self.inputs[Path(name).as_posix()] = hashlib.sha256(path.read_bytes()).hexdigest()

    def write_manifest(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        doc = {
            "command": self.command,
            "tool": "sartol",
            "version": __version__,
            "config": self.config.model_dump(by_alias=True),
            "inputs": dict(sorted(self.inputs.items())),
        }
        (self.out / f"run_{self.command}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _scene_inputs(run: Run, manifest: Path) -> None:
    run.digest(manifest)
    entries, _ = read_scene_manifest(manifest)
    for e in entries:
        for key in ("image", "roads", "valid"):
            if Path(e[key]).is_file():
                run.digest(Path(e[key]))


def _stats_meta(stats: NormStats) -> dict:
    return {"mean": stats.mean, "std": stats.std}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(run: Run) -> None:
    c = run.config
    generate_dataset(c.scene.build(), c.n_scenes, run.out)


def cmd_gt(run: Run) -> None:
    roads_path = run.input("roads")
    run.digest(roads_path)
    roads = read_roads(roads_path)
    mask = rasterize_roads(roads)
    valid = None
    if run.config.paths.valid is not None:
        vpath = run.input("valid")
        run.digest(vpath)
        valid = read_mask_pgm(vpath)
    gt = make_tolerant(mask, run.config.train.t_max, valid)
    run.out.mkdir(parents=True, exist_ok=True)
    write_unit_pgm(gt.y_tol, run.out / "y_tol.pgm")
    write_mask_pgm(gt.y_bin, run.out / "y_bin.pgm")
    write_mask_pgm(gt.valid, run.out / "valid.pgm")


def cmd_tile(run: Run) -> None:
    c = run.config
    manifest = run.input("scenes")
    _scene_inputs(run, manifest)
    scenes = P.load_scenes(manifest)
    stats = P.training_stats(scenes, c.dataset.split_fraction)
    P.write_patches(scenes, stats, c.train.t_max, run.out, c.dataset.split_fraction, c.dataset.patch_size,
                    c.dataset.stride, c.dataset.augment)


def _patch_files(path: Path) -> list[Path]:
    manifest = path / "patches.txt" if path.is_dir() else path
    files = {manifest}
    for line in manifest.read_text(encoding="ascii").splitlines():
        if line and not line.startswith("#"):
            files.update(manifest.parent / f for f in line.split()[1:5])
    return sorted(files)


def cmd_train(run: Run) -> None:
    c = run.config
    path = run.input("patches")
    for f in _patch_files(path):
        run.digest(f)
    meta = read_patch_meta(path)
    if "t_max" in meta and meta["t_max"] != c.train.t_max:
        raise ConfigError(f"train.t_max: {c.train.t_max} does not match the patch set's t_max {meta['t_max']}")
    patches, stats = read_patch_dir(path)
    spec = preset(c.model)
    config = c.train.build()
    params, history = train(spec, patches, config)
    run.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run.out / "model.ckpt", spec, params, {
        "stats": _stats_meta(stats),
        "train": config.to_dict(),
        "f_road": road_frequency(patches.y_bin, patches.valid),
    })
    (run.out / "history.csv").write_text(history.to_csv())


def cmd_predict(run: Run) -> None:
    c = run.config
    ckpt, image_path = run.input("checkpoint"), run.input("image")
    run.digest(ckpt)
    run.digest(image_path)
    spec, params, meta = load_checkpoint(ckpt)
    if "stats" not in meta:
        raise DataError(f"{ckpt}: checkpoint carries no normalization stats")
    stats = NormStats(**meta["stats"])
    image = normalize(read_pgm(image_path), stats)
    pred = predict_full(spec, params, image, c.eval.tile, c.eval.overlap)
    run.out.mkdir(parents=True, exist_ok=True)
    write_unit_pgm(pred, run.out / "prediction.pgm")


def _read_truth(path: Path) -> np.ndarray:
    if path.suffix == ".txt":
        return rasterize_roads(read_roads(path))
    return read_mask_pgm(path)


def cmd_eval(run: Run) -> None:
    c = run.config
    pred_path, truth_path = run.input("prediction"), run.input("truth")
    run.digest(pred_path)
    run.digest(truth_path)
    prediction = read_unit_pgm(pred_path)
    truth = _read_truth(truth_path)
    if truth.shape != prediction.shape:
        raise DataError(f"prediction {prediction.shape} and truth {truth.shape} differ in size")
    valid = np.ones_like(truth)
    if c.paths.valid is not None:
        vpath = run.input("valid")
        run.digest(vpath)
        valid = read_mask_pgm(vpath)
        if valid.shape != truth.shape:
            raise DataError(f"valid mask {valid.shape} and truth {truth.shape} differ in size")
    if c.eval.region == "test":
        split = split_area(truth.shape[0], truth.shape[1], c.dataset.split_fraction)
        valid = valid & split.test_region.mask(truth.shape)
    pred = binarize(prediction, c.eval.threshold)
    report = metrics(confusion(pred, truth, valid), area=c.eval.region, model=c.model,
                     t_max=c.train.t_max, **{"lambda": c.train.lam})
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "metrics.csv").write_text(sweep_report([report]))
    write_ppm(overlay(pred, truth, valid), run.out / "overlay.ppm")


def cmd_sweep(run: Run) -> None:
    c = run.config
    manifest = run.input("scenes")
    _scene_inputs(run, manifest)
    scenes = P.load_scenes(manifest)
    frac = c.dataset.split_fraction
    stats = P.training_stats(scenes, frac)
    spec = preset(c.model)
    reports = []
    for t_max in c.sweep.t_max:
        patches = P.build_patches(scenes, stats, t_max, frac, c.dataset.patch_size, c.dataset.stride,
                                  c.dataset.augment)
        for lam in c.sweep.lam:
            config = c.train.build(t_max=t_max, lam=lam)
            params, history = train(spec, patches, config)
            cell = run.out / "cells" / f"t{t_max}_l{lam:g}"
            cell.mkdir(parents=True, exist_ok=True)
            save_checkpoint(cell / "model.ckpt", spec, params,
                            {"stats": _stats_meta(stats), "train": config.to_dict()})
            (cell / "history.csv").write_text(history.to_csv())
            reports.append(P.evaluate_heldout(spec, params, scenes, stats, frac, c.eval.threshold, c.eval.tile,
                                              c.eval.overlap, model=c.model, t_max=t_max, **{"lambda": lam}))
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "sweep.csv").write_text(sweep_report(reports))


HANDLERS = {
    "synth": cmd_synth,
    "gt": cmd_gt,
    "tile": cmd_tile,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sartol", description="Tolerant road segmentation on SAR-like scenes.")
    parser.add_argument("--version", action="version", version=f"sartol {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config key assignment, e.g. train.lambda=2 (repeatable)")
    return parser


def run_command(command: str, config_path, overrides=()) -> None:
    config, base = load_config(config_path, list(overrides))
    run = Run(command, config, base)
    HANDLERS[command](run)
    run.write_manifest()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run_command(args.command, args.config, args.override)
    except ConfigError as exc:
        print(f"sartol: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"sartol: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        print(f"sartol: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
