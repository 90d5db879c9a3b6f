"""Class-weighted mean squared error against tolerant targets."""

from __future__ import annotations

import numpy as np

from ..errors import DataError


def pixel_weights(y_bin: np.ndarray, valid: np.ndarray, lam: float) -> np.ndarray:
    """``lam`` on valid road pixels, 1 on valid background, 0 elsewhere."""
    return np.where(valid, np.where(y_bin, lam, 1.0), 0.0)


def weighted_mse(prediction, y_tol, y_bin, valid, lam: float) -> float:
    """Mean of ``w * (y - y_hat)^2`` over the valid pixels.

    All arrays share one shape; accumulation is in float64.
    """
    prediction = np.asarray(prediction)
    if not (prediction.shape == np.shape(y_tol) == np.shape(y_bin) == np.shape(valid)):
        raise ValueError("prediction, targets and masks must share one shape")
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise DataError("loss needs at least one valid pixel")
    w = pixel_weights(np.asarray(y_bin, dtype=bool), valid, lam)
    r = np.asarray(y_tol, dtype=np.float64) - prediction.astype(np.float64)
    return float((w * r * r).sum() / n)


def weighted_mse_grad(prediction, y_tol, y_bin, valid, lam: float) -> np.ndarray:
    """``dL/dy_hat = 2 w (y_hat - y) / N`` in the prediction's dtype."""
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise DataError("loss needs at least one valid pixel")
    w = pixel_weights(np.asarray(y_bin, dtype=bool), valid, lam)
    g = (2.0 / n) * w * (prediction.astype(np.float64) - np.asarray(y_tol, dtype=np.float64))
    return g.astype(prediction.dtype)
