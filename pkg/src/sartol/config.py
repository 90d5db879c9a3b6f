"""Run configuration: one JSON document drives every CLI command.

Layout (every section and key optional, defaults shown by ``sartol`` in
each run manifest)::

    {
      "scene":   {SceneConfig fields},
      "n_scenes": 8,
      "dataset": {"split_fraction": 0.8, "patch_size": 256, "stride": 256, "augment": "rotations"},
      "model":   "MiniFCN",
      "train":   {"learning_rate": 5e-4, "lr_decay": 0.9, "beta1": 0.9, "beta2": 0.999,
                  "epsilon": 1e-8, "epochs": 10, "batch_size": 16, "t_max": 4,
                  "lambda": 1.0, "seed": 0},
      "eval":    {"threshold": 0.5, "tile": 256, "overlap": 32, "region": "all"},
      "sweep":   {"t_max": [0, 1, 2, 4, 8], "lambda": [1.0]},
      "paths":   {"scenes": ..., "roads": ..., "valid": ..., "patches": ..., "checkpoint": ...,
                  "image": ..., "prediction": ..., "truth": ..., "out": "out"}
    }

Unknown keys are rejected.  Relative paths resolve against the directory
of the config file.
"""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .autonet.model import PRESETS
from .autonet.train import TrainConfig
from .errors import ConfigError
from .synthscene import SceneConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class SceneSection(_Strict):
    width: int = Field(1024, ge=128)
    height: int = Field(1024, ge=128)
    n_major: int = Field(2, ge=0)
    n_country: int = Field(3, ge=0)
    n_dirt: int = Field(4, ge=0)
    n_rivers: int = Field(1, ge=0)
    n_hedges: int = Field(4, ge=0)
    looks: int = Field(1, ge=1)
    contrast: float = Field(0.25, gt=0, lt=1)
    embankment_gain: float = Field(2.0, ge=1)
    seed: int = Field(0, ge=0)

    def build(self) -> SceneConfig:
        return SceneConfig(**self.model_dump())


class DatasetSection(_Strict):
    split_fraction: float = Field(0.8, gt=0, lt=1)
    patch_size: int = Field(256, ge=8)
    stride: int = Field(256, ge=1)
    augment: Literal["none", "rotations", "rotations_and_flips"] = "rotations"


class TrainSection(_Strict):
    learning_rate: float = Field(5e-4, gt=0)
    lr_decay: float = Field(0.90, gt=0, le=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(16, ge=1)
    t_max: int = Field(4, ge=0)
    lam: float = Field(1.0, ge=1, alias="lambda")
    seed: int = Field(0, ge=0)

    def build(self, **changes) -> TrainConfig:
        d = {f.name: getattr(self, f.name) for f in fields(TrainConfig)}
        d.update(changes)
        return TrainConfig(**d)


class EvalSection(_Strict):
    threshold: float = Field(0.5, ge=0, le=1)
    tile: int = Field(256, ge=8)
    overlap: int = Field(32, ge=0)
    region: Literal["all", "test"] = "all"


class SweepSection(_Strict):
    t_max: list[int] = Field(default_factory=lambda: [0, 1, 2, 4, 8])
    lam: list[float] = Field(default_factory=lambda: [1.0], alias="lambda")

    @field_validator("t_max")
    @classmethod
    def _t_nonneg(cls, v):
        if not v or min(v) < 0:
            raise ValueError("needs at least one value, all >= 0")
        return v

    @field_validator("lam")
    @classmethod
    def _lam_ge1(cls, v):
        if not v or min(v) < 1:
            raise ValueError("needs at least one value, all >= 1")
        return v


class PathsSection(_Strict):
    scenes: Optional[str] = None
    roads: Optional[str] = None
    valid: Optional[str] = None
    patches: Optional[str] = None
    checkpoint: Optional[str] = None
    image: Optional[str] = None
    prediction: Optional[str] = None
    truth: Optional[str] = None
    out: str = "out"


class RunConfig(_Strict):
    scene: SceneSection = SceneSection()
    n_scenes: int = Field(8, ge=0)
    dataset: DatasetSection = DatasetSection()
    model: str = "MiniFCN"
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    sweep: SweepSection = SweepSection()
    paths: PathsSection = PathsSection()

    @field_validator("model")
    @classmethod
    def _known_model(cls, v):
        if v not in PRESETS:
            raise ValueError(f"unknown model, expected one of {sorted(PRESETS)}")
        return v

    def to_json(self) -> str:
        return json.dumps(self.model_dump(by_alias=True), indent=2, sort_keys=True) + "\n"


def _explain(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{key}: {err['msg']}")
    return "; ".join(parts)


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """``key.sub=value`` assignments; values parse as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = _coerce(value)
    return data


def parse_config(data: dict, overrides: list[str] = ()) -> RunConfig:
    try:
        return RunConfig.model_validate(apply_overrides(data, list(overrides)))
    except ValidationError as exc:
        raise ConfigError(_explain(exc)) from None


def load_config(path, overrides: list[str] = ()) -> tuple[RunConfig, Path]:
    """The validated config and the directory relative paths resolve against."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    return parse_config(data, overrides), p.resolve().parent
