"""Training loop, learning-rate schedule and tiled whole-image inference."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..dataset import PatchSet, epoch_iter, road_frequency, weight_interval
from ..errors import ConfigError, NumericError
from ..rng import MASK64, mix64
from .loss import weighted_mse, weighted_mse_grad
from .model import ModelSpec, backward, forward, init_params
from .optim import BETA1, BETA2, EPSILON, AdamState, adam_step

_EPOCH_KEY = 0xD1B54A32D192ED03


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    lr_decay: float = 0.90
    beta1: float = BETA1
    beta2: float = BETA2
    epsilon: float = EPSILON
    epochs: int = 10
    batch_size: int = 16
    t_max: int = 4
    lam: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must be in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("adam epsilon must be > 0")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.t_max < 0:
            raise ConfigError(f"t_max must be >= 0, got {self.t_max}")
        if not self.lam >= 1:
            raise ConfigError(f"lambda must be >= 1, got {self.lam}")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay**epoch

    def check_weight(self, f_road: float) -> None:
        """Rejects a road weight outside ``[1, 1 / f_road]``."""
        lo, hi = weight_interval(f_road)
        if not lo <= self.lam <= hi * (1 + 1e-12):
            raise ConfigError(f"lambda {self.lam} outside the admissible interval [{lo}, {hi:.6g}] "
                              f"for road frequency {f_road:.6g}")

    def to_dict(self) -> dict:
        return asdict(self)


def epoch_seed(seed: int, epoch: int) -> int:
    return mix64((seed + (epoch + 1) * _EPOCH_KEY) & MASK64)


@dataclass
class History:
    """Per-epoch learning rate and mean batch loss, plus every step loss."""

    lrs: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,lr,mean_loss"]
        for e, (lr, loss) in enumerate(zip(self.lrs, self.epoch_loss)):
            lines.append(f"{e},{lr!r},{loss!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "History":
        h = cls()
        for line in text.strip().splitlines()[1:]:
            _, lr, loss = line.split(",")
            h.lrs.append(float(lr))
            h.epoch_loss.append(float(loss))
        return h


def train(spec: ModelSpec, patches: PatchSet, config: TrainConfig,
          params: dict[str, np.ndarray] | None = None, progress=None) -> tuple[dict[str, np.ndarray], History]:
    """ADAM on the weighted MSE, one learning rate per epoch.

    ``progress(epoch, step, loss)`` is called after every step when given.
    """
    if len(patches) == 0:
        raise ConfigError("training needs at least one patch")
    config.check_weight(road_frequency(patches.y_bin, patches.valid))
    if params is None:
        params = init_params(spec, config.seed)
    state = AdamState()
    history = History()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        total = 0.0
        steps = 0
        for step, idx in enumerate(epoch_iter(patches, config.batch_size, epoch_seed(config.seed, epoch))):
            x = patches.images[idx][:, None]
            y_tol = patches.y_tol[idx][:, None]
            y_bin = patches.y_bin[idx][:, None]
            valid = patches.valid[idx][:, None]
            try:
                pred, cache = forward(spec, params, x, "train")
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from None
            loss = weighted_mse(pred, y_tol, y_bin, valid, config.lam)
            if not math.isfinite(loss):
                raise NumericError(f"epoch {epoch} step {step}: loss is {loss}")
            grads = backward(spec, params, cache, weighted_mse_grad(pred, y_tol, y_bin, valid, config.lam))
            adam_step(params, grads, state, lr, config.beta1, config.beta2, config.epsilon)
            history.step_loss.append(loss)
            total += loss
            steps += 1
            if progress is not None:
                progress(epoch, step, loss)
        history.lrs.append(lr)
        history.epoch_loss.append(total / steps)
    return params, history


def tile_starts(size: int, tile: int, overlap: int) -> list[int]:
    """Tile origins along one axis: stride ``tile - overlap``, last flush with the end."""
    if size <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, size - tile, step))
    starts.append(size - tile)
    return starts


def predict_full(spec: ModelSpec, params: dict[str, np.ndarray], image: np.ndarray, tile: int = 256,
                 overlap: int = 32, batch_size: int = 1) -> np.ndarray:
    """Sliding-tile inference over a normalized 2-D image.

    Images smaller than a tile are mirror-padded up to one tile.
    Overlapping tile predictions are averaged with equal weight.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    factor = spec.downsampling
    if tile % factor:
        raise ConfigError(f"tile {tile} is not divisible by the downsampling factor {factor}")
    if overlap < 0 or tile < 2 * overlap:
        raise ConfigError(f"need 0 <= overlap and tile >= 2 * overlap, got tile {tile}, overlap {overlap}")
    h, w = image.shape
    ph, pw = max(0, tile - h), max(0, tile - w)
    padded = np.pad(image, ((0, ph), (0, pw)), mode="symmetric") if ph or pw else image
    H, W = padded.shape
    acc = np.zeros((H, W))
    count = np.zeros((H, W))
    origins = [(r, c) for r in tile_starts(H, tile, overlap) for c in tile_starts(W, tile, overlap)]
    for start in range(0, len(origins), batch_size):
        chunk = origins[start : start + batch_size]
        batch = np.stack([padded[r : r + tile, c : c + tile] for r, c in chunk])[:, None]
        pred, _ = forward(spec, params, batch, "infer")
        for (r, c), p in zip(chunk, pred[:, 0]):
            acc[r : r + tile, c : c + tile] += p
            count[r : r + tile, c : c + tile] += 1
    return (acc / count)[:h, :w].astype(np.float32)
