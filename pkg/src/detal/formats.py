"""On-disk formats: feature files, checkpoints, JSON-lines records.

Feature file: b"DETAL1", uint32 LE T, uint32 LE D, then T*D float32 LE
(snippet-major). Checkpoint: b"DETCKPT1", uint32 LE header length, UTF-8
JSON header, then every parameter as float32 LE in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"DETAL1"
CHECKPOINT_MAGIC = b"DETCKPT1"
POOL_SCHEMA = 1


class FormatError(ValueError):
    pass


def write_features(path, features: np.ndarray) -> None:
    x = np.ascontiguousarray(features, dtype="<f4")
    if x.ndim != 2:
        raise FormatError(f"features must be 2-D, got shape {x.shape}")
    T, D = x.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", T, D))
        f.write(x.tobytes(order="C"))


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    n = len(FEATURE_MAGIC)
    if raw[:n] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic")
    T, D = struct.unpack("<II", raw[n:n + 8])
    body = raw[n + 8:]
    if len(body) != 4 * T * D:
        raise FormatError(f"{path}: expected {T}x{D} floats, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(T, D).astype(np.float32)


def config_hash(cfg_dict: dict) -> str:
    blob = json.dumps(cfg_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_checkpoint(path, params: dict[str, np.ndarray], header: dict | None = None) -> None:
    header = dict(header or {})
    names = sorted(params)
    header["tensors"] = [[k, list(params[k].shape)] for k in names]
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for k in names:
            f.write(np.ascontiguousarray(params[k], dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    n = len(CHECKPOINT_MAGIC)
    if raw[:n] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (hlen,) = struct.unpack("<I", raw[n:n + 4])
    header = json.loads(raw[n + 4:n + 4 + hlen])
    off = n + 4 + hlen
    params = {}
    for name, shape in header["tensors"]:
        size = int(np.prod(shape)) if shape else 1
        chunk = raw[off:off + 4 * size]
        if len(chunk) != 4 * size:
            raise FormatError(f"{path}: truncated tensor {name}")
        params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return params, header


def write_jsonl(path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
