"""Binary checkpoints.

Layout (all integers little-endian)::

    b"FSHN1"
    u32 metadata length, UTF-8 JSON metadata
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 ndim, ndim x u64 dims,
                prod(dims) x f64 values (little-endian, C order)
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FSHN1"
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def dumps(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    chunks.append(struct.pack("<I", len(arrays)))
    for name, value in arrays.items():
        arr = np.asarray(value, dtype=_F64, order="C")
        key = name.encode("utf-8")
        if len(key) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(key)))
        chunks.append(key)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    if bytes(view[: len(MAGIC)]) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    pos = len(MAGIC)

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype=_F64).reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError("trailing bytes after the last tensor")
    return meta, arrays


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    """Write atomically: a crash never leaves a half-written checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(meta, arrays))
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
