"""Binary weight checkpoints.

Layout (all integers unsigned 64-bit little-endian)::

    b"PSRD1"
    count
    repeated count times:
        name_length, name (UTF-8), rank, extents[rank], data (float64 LE, row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"PSRD1"
_U64 = struct.Struct("<Q")


def save_checkpoint(params: Mapping[str, Tensor | np.ndarray], path) -> None:
    """Write named tensors to ``path`` in insertion order."""
    chunks = [MAGIC, _U64.pack(len(params))]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw = name.encode("utf-8")
        chunks.append(_U64.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_U64.pack(arr.ndim))
        chunks.extend(_U64.pack(d) for d in arr.shape)
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_checkpoint` as float64 arrays."""
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise FormatError(f"{path}: not a PSRD1 checkpoint")
    pos = len(MAGIC)

    def u64() -> int:
        nonlocal pos
        if pos + 8 > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        (v,) = _U64.unpack_from(buf, pos)
        pos += 8
        return v

    out: dict[str, np.ndarray] = {}
    for _ in range(u64()):
        nlen = u64()
        if pos + nlen > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        try:
            name = buf[pos : pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: tensor name is not UTF-8") from None
        pos += nlen
        shape = tuple(u64() for _ in range(u64()))
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * count
        if end > len(buf):
            raise FormatError(f"{path}: truncated data for {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos = end
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
