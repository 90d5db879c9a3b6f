"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"SARTOLCK"
    uint32    format version (1)
    uint32    header length in bytes
    header    UTF-8 JSON: {"spec": ModelSpec, "tensors": [[name, shape], ...], "meta": {...}}
    payload   every tensor in header order, float32 little-endian, C order

The JSON is written with sorted keys and no whitespace, so identical
models produce identical files.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from .model import ModelSpec, param_shapes

MAGIC = b"SARTOLCK"
VERSION = 1


def encode_checkpoint(spec: ModelSpec, params: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    shapes = param_shapes(spec)
    if set(shapes) != set(params):
        missing = sorted(set(shapes) ^ set(params))
        raise ValueError(f"parameters do not match the model spec: {missing}")
    tensors = [[name, list(shape)] for name, shape in shapes.items()]
    header = json.dumps({"spec": spec.to_dict(), "tensors": tensors, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    for name, shape in shapes.items():
        a = np.asarray(params[name])
        if a.shape != shape:
            raise ValueError(f"{name}: shape {a.shape} does not match spec {shape}")
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[ModelSpec, dict[str, np.ndarray], dict]:
    if data[:8] != MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    if len(data) < 16:
        raise DataError("checkpoint truncated in the fixed header")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from None
    pos = 16 + hlen
    params = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) * 4
        if pos + n > len(data):
            raise DataError(f"checkpoint truncated in tensor {name}")
        params[name] = np.frombuffer(data, dtype="<f4", count=n // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += n
    if pos != len(data):
        raise DataError(f"checkpoint has {len(data) - pos} trailing bytes")
    if set(params) != set(param_shapes(spec)):
        raise DataError("checkpoint tensors do not match its model spec")
    return spec, params, header["meta"]


def save_checkpoint(path: str | os.PathLike, spec: ModelSpec, params: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(spec, params, meta))


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelSpec, dict[str, np.ndarray], dict]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint not found: {p}")
    return decode_checkpoint(p.read_bytes())
