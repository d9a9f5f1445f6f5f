"""Binary checkpoint format (``.efck``).

Layout, all integers little-endian::

    b"EFCK"  u32 version=1  u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 rank, u32[rank] extents,
                float32 payload (row-major)
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError, CheckpointMismatchError

MAGIC = b"EFCK"
VERSION = 1


def encode(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(buf):
                raise CheckpointError(f"{name}: truncated payload")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after {count} tensors")
    return out


def save(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(params))


def load(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    return decode(Path(path).read_bytes())


def check_layout(params: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]]) -> None:
    """Raise :class:`CheckpointMismatchError` naming the first tensor that disagrees."""
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointMismatchError(name, "missing from checkpoint")
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointMismatchError(name, f"shape {tuple(params[name].shape)} != expected {tuple(shape)}")
    for name in params:
        if name not in expected:
            raise CheckpointMismatchError(name, "not part of the configured model")
