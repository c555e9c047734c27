"""Flat parameter checkpoint files.

Layout (all integers little-endian)::

    b"SKF1"  u32 record_count
    repeated record_count times:
        u32 name_len, name (utf-8), u32 ndim, u32 dims[ndim], f64 values[prod(dims)]

Values are stored in C order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn import ParamStore

MAGIC = b"SKF1"


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, values in arrays.items():
        raw = name.encode("utf-8")
        values = np.asarray(values, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(values.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            values = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            out[name] = values.astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def save_store(path, store: ParamStore) -> None:
    save_arrays(path, store.state_arrays())


def load_store(path, store: ParamStore, strict: bool = True) -> None:
    store.load_arrays(load_arrays(path), strict=strict)
