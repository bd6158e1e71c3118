"""LPQ1 tensor container.

Layout (all little-endian)::

    b"LPQ1" | u16 version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 rank | rank x u32 extents | f32 payload

Every payload is float32. Integer grids (code indices, label volumes) are
stored as exactly representable floats and cast back by the reader's caller.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContainerError

MAGIC = b"LPQ1"
VERSION = 1
_U32_MAX = 2**32 - 1
_F32_EXACT_INT = 2**24


def _as_f32(name: str, value) -> np.ndarray:
    arr = np.asarray(value.detach().cpu().numpy() if hasattr(value, "detach") else value)
    if arr.dtype.kind in "iub":
        if arr.size and (arr.min() < -_F32_EXACT_INT or arr.max() > _F32_EXACT_INT):
            raise ContainerError(f"{name}: integer values exceed float32 exact range")
        return arr.astype(np.float32)
    if arr.dtype.kind != "f":
        raise ContainerError(f"{name}: unsupported dtype {arr.dtype}")
    out = arr.astype(np.float32)
    if not np.isfinite(out).all():
        raise ContainerError(f"{name}: non-finite values")
    return out


def encode_container(tensors: Mapping[str, object]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = _as_f32(name, value)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ContainerError("entry name too long")
        if arr.ndim > 255:
            raise ContainerError(f"{name}: rank {arr.ndim} exceeds 255")
        if any(d > _U32_MAX for d in arr.shape):
            raise ContainerError(f"{name}: extent overflow")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_container(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated payload")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerError("bad magic")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError("entry name is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = 1
        for d in dims:
            n *= d
        if n * 4 > len(view) - pos:
            raise ContainerError(f"{name}: extent overflow / truncated payload")
        payload = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32)
        out[name] = payload.reshape(dims)
    if pos != len(view):
        raise ContainerError("trailing bytes after last entry")
    return out


def write_container(path: str | os.PathLike, tensors: Mapping[str, object]) -> None:
    Path(path).write_bytes(encode_container(tensors))


def read_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_container(Path(path).read_bytes())
