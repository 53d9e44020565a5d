"""Flat binary container of named tensors.

Layout (little-endian)::

    16-byte magic | u32 format version | u32 entry count
    per entry: u16 name length | utf-8 name | u8 dtype tag | u8 ndim
               | u32 dims[ndim] | row-major payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SRL-CHECKPOINT\x00\x00"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {np.dtype(v).newbyteorder("="): k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            tag = _TAGS.get(arr.dtype.newbyteorder("="))
            if tag is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"truncated {what} at offset {off}")
        chunk = buf[off : off + n]
        off += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic at offset 0)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset {len(MAGIC)}")
    out = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2, "name length"))
        name = take(n_name, "name").decode()
        tag, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if tag not in DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} at offset {off - 2}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        dt = DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(take(n, f"payload of {name!r}"), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if off != len(buf):
        raise CheckpointError(f"trailing bytes at offset {off}")
    return out
