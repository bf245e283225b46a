"""Flat binary checkpoint format.

Layout::

    b"FTCK" | uint32 version | uint64 header length | JSON header | arrays

The JSON header holds free-form metadata plus, under ``"arrays"``, an ordered
list of ``[name, dtype, shape]`` triples. Arrays follow back to back as
little-endian, C-ordered raw bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FTCK"
VERSION = 1


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    specs = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        specs.append([name, dtype.str, list(arr.shape)])
        blobs.append(arr.astype(dtype, copy=False).tobytes(order="C"))
    header = json.dumps({"meta": meta, "arrays": specs}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[offset:offset + hlen])
    offset += hlen
    arrays = {}
    for name, dtype, shape in header["arrays"]:
        dt = np.dtype(dtype)
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dt.itemsize
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(shape)
        arrays[name] = arr.astype(dt.newbyteorder("="), copy=True)
        offset += nbytes
    return header["meta"], arrays
