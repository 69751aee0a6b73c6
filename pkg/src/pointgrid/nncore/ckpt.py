"""Checkpoint container: a documented little-endian binary file.

Layout:

    magic   4 bytes  b"PGCP"
    version u32      (currently 1)
    meta    u32 length + UTF-8 text (config echo / scalar state, key=value lines)
    count   u32      number of array records
    record  name (u32 length + UTF-8), dtype code u8 (0=f32, 1=f64),
            ndim u8, dims u32 * ndim, raw little-endian array bytes

Parameters and Adam moment buffers are stored as records; scalar training
state travels in the meta text.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PGCP"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(Exception):
    pass


def write_arrays(path, meta: str, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    meta_bytes = meta.encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_arrays(path) -> tuple[str, dict[str, np.ndarray]]:
    path = Path(path)
    data = path.read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = take(meta_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="))
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return meta, arrays
