"""TPCK checkpoint format.

Layout, all integers little-endian u32::

    "TPCK" | version=1 | meta_len | meta (UTF-8 JSON, sorted keys) | count
    then per tensor: name_len | name (UTF-8) | ndim | dims... | float64 LE data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["encode_checkpoint", "decode_checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"TPCK"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_checkpoint(tensors: dict, meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta_bytes)), meta_bytes, _U32.pack(len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        out += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        out += [_U32.pack(n) for n in arr.shape]
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> tuple[dict, dict]:
    pos = 0

    def u32():
        nonlocal pos
        if pos + 4 > len(buf):
            raise ValueError("truncated checkpoint")
        (v,) = _U32.unpack_from(buf, pos)
        pos += 4
        return v

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError("truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise ValueError("not a TPCK checkpoint")
    version = u32()
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(take(u32()).decode("utf-8"))
    tensors = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise ValueError("trailing bytes after checkpoint")
    return tensors, meta


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, meta))


def load_checkpoint(path) -> tuple[dict, dict]:
    return decode_checkpoint(Path(path).read_bytes())
