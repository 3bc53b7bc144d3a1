"""PVCK checkpoint files.

Layout (little-endian)::

    b"PVCK"  u32 version  u32 meta_len  meta (UTF-8 JSON, sorted keys)
    u32 n_records
    per record: u16 name_len  name  u8 ndim  u32 * ndim shape  float32 data

Records keep their insertion order, so loading and re-saving a checkpoint
reproduces it byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PVCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode()
        parts.append(struct.pack("<HB", len(key), arr.ndim) + key)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(raw: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a PVCK checkpoint")
    try:
        version, meta_len = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"{source}: checkpoint version {version}, this build reads {VERSION}")
        pos = 12
        meta = json.loads(raw[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", raw, pos)
            pos += 3
            name = raw[pos:pos + name_len].decode()
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 4
            if pos + size > len(raw):
                raise CheckpointError(f"{source}: record {name!r} is truncated")
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt checkpoint ({e})") from None
    if pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - pos} trailing bytes")
    return meta, arrays


def save(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(meta, arrays))
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    return decode(path.read_bytes(), str(path))


def prefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in arrays.items()}


def strip_prefix(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
