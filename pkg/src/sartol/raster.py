"""Grayscale rasters: binary PGM I/O, z-score statistics and non-local means.

A :class:`Raster` wraps a 2-D ``uint16`` array.  Real-valued grids
(normalized inputs, predictions, target fields) are plain ``float``
ndarrays and are validated with :func:`check_float_raster`.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DataError

MAX_SAMPLE = 65535

__all__ = [
    "Raster",
    "NormStats",
    "NlMeansParams",
    "PgmFormatError",
    "PgmTruncatedError",
    "DegenerateStatsError",
    "check_float_raster",
    "read_pgm",
    "write_pgm",
    "encode_pgm",
    "decode_pgm",
    "compute_stats",
    "normalize",
    "estimate_noise_sigma",
    "nl_means",
]


class PgmFormatError(DataError):
    """Malformed PGM header."""


class PgmTruncatedError(PgmFormatError):
    """Payload shorter than the header announces."""


class DegenerateStatsError(DataError):
    """Statistics requested over constant data."""


@dataclass(frozen=True)
class Raster:
    """Integer-valued grayscale image, indexed ``samples[row, col]``."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise ValueError(f"raster must be a non-empty 2-D grid, got shape {s.shape}")
        if s.dtype != np.uint16:
            if s.size and (s.min() < 0 or s.max() > MAX_SAMPLE):
                raise ValueError("raster samples must lie in [0, 65535]")
            if np.issubdtype(s.dtype, np.floating) and not np.array_equal(s, np.round(s)):
                raise ValueError("raster samples must be integers")
            s = s.astype(np.uint16)
        object.__setattr__(self, "samples", s)

    @classmethod
    def from_list(cls, width: int, height: int, samples) -> "Raster":
        arr = np.asarray(samples)
        if arr.size != width * height:
            raise ValueError(f"expected {width * height} samples, got {arr.size}")
        return cls(arr.reshape(height, width))

    @property
    def width(self) -> int:
        return int(self.samples.shape[1])

    @property
    def height(self) -> int:
        return int(self.samples.shape[0])

    @property
    def maxval(self) -> int:
        """Maxval written by :func:`write_pgm`."""
        return 255 if int(self.samples.max()) < 256 else MAX_SAMPLE

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return np.array_equal(self.samples, other.samples)

    __hash__ = None


def check_float_raster(values: np.ndarray, name: str = "raster") -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2 or 0 in arr.shape:
        raise ValueError(f"{name} must be a non-empty 2-D grid, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    m = _TOKEN.match(data, pos)
    if m is None:
        raise PgmFormatError(f"unexpected end of header at byte {pos}")
    return m.group(1), m.end()


def _header_int(token: bytes, what: str) -> int:
    if not token.isdigit():
        raise PgmFormatError(f"bad {what} token {token!r}")
    return int(token)


def decode_pgm(data: bytes) -> Raster:
    """Parse the bytes of a binary (P5) PGM file."""
    magic, pos = _next_token(data, 0)
    if magic != b"P5":
        raise PgmFormatError(f"bad magic token {magic!r}, expected b'P5'")
    tok, pos = _next_token(data, pos)
    width = _header_int(tok, "width")
    tok, pos = _next_token(data, pos)
    height = _header_int(tok, "height")
    tok, pos = _next_token(data, pos)
    maxval = _header_int(tok, "maxval")
    if width < 1 or height < 1:
        raise PgmFormatError(f"bad dimensions {width}x{height}")
    if not 1 <= maxval <= MAX_SAMPLE:
        raise PgmFormatError(f"bad maxval token {tok!r}")
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise PgmTruncatedError("missing whitespace after maxval")
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise PgmTruncatedError(
            f"payload has {len(payload)} bytes, header {width}x{height} maxval {maxval} needs {need}"
        )
    samples = np.frombuffer(payload, dtype=dtype).reshape(height, width).astype(np.uint16)
    if samples.size and int(samples.max()) > maxval:
        raise PgmFormatError(f"sample {int(samples.max())} exceeds maxval {maxval}")
    return Raster(samples)


def encode_pgm(raster: Raster, maxval: int | None = None) -> bytes:
    """P5 bytes: ``P5 <w> <h> <maxval>\\n`` followed by the payload.

    Without ``maxval`` the canonical value is used (255 when every sample
    fits a byte, else 65535).  Fixed-point grids force ``maxval=65535``.
    """
    if maxval is None:
        maxval = raster.maxval
    elif maxval not in (255, MAX_SAMPLE) or int(raster.samples.max()) > maxval:
        raise ValueError(f"maxval {maxval} cannot hold these samples")
    header = f"P5 {raster.width} {raster.height} {maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    return header + raster.samples.astype(dtype).tobytes()


def read_pgm(path: str | os.PathLike) -> Raster:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_pgm(data)
    except PgmFormatError as exc:
        raise type(exc)(f"{os.fspath(path)}: {exc}") from None


def write_pgm(raster: Raster, path: str | os.PathLike, maxval: int | None = None) -> None:
    data = encode_pgm(raster, maxval)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write PGM {os.fspath(path)}: {exc.strerror}") from exc


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not (self.std > 0 and math.isfinite(self.std)):
            raise DegenerateStatsError(f"std must be positive, got {self.std}")


def compute_stats(rasters: Iterable[Raster | np.ndarray]) -> NormStats:
    """Population mean and standard deviation over every pixel of every raster."""
    arrays = [np.asarray(r.samples if isinstance(r, Raster) else r, dtype=np.float64).ravel()
              for r in rasters]
    if not arrays:
        raise DegenerateStatsError("no rasters given")
    count = sum(a.size for a in arrays)
    mean = math.fsum(float(a.sum()) for a in arrays) / count
    var = math.fsum(float(np.square(a - mean).sum()) for a in arrays) / count
    std = math.sqrt(var)
    if std == 0.0:
        raise DegenerateStatsError("constant data has zero standard deviation")
    return NormStats(mean, std)


def normalize(raster: Raster | np.ndarray, stats: NormStats) -> np.ndarray:
    samples = raster.samples if isinstance(raster, Raster) else raster
    return (np.asarray(samples, dtype=np.float64) - stats.mean) / stats.std


# ---------------------------------------------------------------------------
# Non-local means
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NlMeansParams:
    patch_radius: int = 1
    search_radius: int = 5
    h: float = 1.0

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if self.search_radius < self.patch_radius:
            raise ValueError("search_radius must be >= patch_radius")
        if not self.h > 0:
            raise ValueError("h must be positive")


def estimate_noise_sigma(image: np.ndarray) -> float:
    """Robust noise level from the MAD of horizontal first differences."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[1] < 2:
        return 0.0
    d = np.diff(img, axis=1).ravel()
    mad = float(np.median(np.abs(d - np.median(d))))
    return mad / math.sqrt(2.0) / 0.6745


def _box_mean(a: np.ndarray, r: int, out_shape: tuple[int, int]) -> np.ndarray:
    # a has a margin of r on every side of out_shape
    k = 2 * r + 1
    c = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=c[1:, 1:])
    h, w = out_shape
    s = c[k : k + h, k : k + w] - c[:h, k : k + w] - c[k : k + h, :w] + c[:h, :w]
    return s / (k * k)


def nl_means(raster: Raster, params: NlMeansParams) -> Raster:
    """Non-local means with a noise-offset weight kernel.

    Each output pixel is the normalized weighted average of its search
    window, the weight of a candidate being
    ``exp(-max(0, d2 - 2 sigma^2) / h^2)`` where ``d2`` is the mean squared
    difference between the two patches and ``sigma`` is the estimate from
    :func:`estimate_noise_sigma`.  Borders are mirror-padded.
    """
    pr, sr = params.patch_radius, params.search_radius
    img = raster.samples.astype(np.float64)
    h, w = img.shape
    if h < 2 * sr + 1 or w < 2 * sr + 1:
        raise ValueError(f"raster {w}x{h} smaller than search window {2 * sr + 1}")
    sigma = estimate_noise_sigma(img)
    offset = 2.0 * sigma * sigma
    h2 = params.h * params.h
    m = pr + sr
    pad = np.pad(img, m, mode="reflect")
    center = pad[sr : sr + h + 2 * pr, sr : sr + w + 2 * pr]
    num = np.zeros_like(img)
    den = np.zeros_like(img)
    for dy in range(-sr, sr + 1):
        for dx in range(-sr, sr + 1):
            shifted = pad[sr + dy : sr + dy + h + 2 * pr, sr + dx : sr + dx + w + 2 * pr]
            d2 = _box_mean(np.square(center - shifted), pr, (h, w))
            wgt = np.exp(-np.maximum(d2 - offset, 0.0) / h2)
            num += wgt * shifted[pr : pr + h, pr : pr + w]
            den += wgt
    out = np.clip(np.rint(num / den), img.min(), img.max())
    return Raster(out.astype(np.uint16))
