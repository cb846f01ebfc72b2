"""STRV container writer/reader.

Byte layout (little-endian): 4-byte magic "STRV", u32 version 1, u64
metadata length, UTF-8 JSON metadata with a "tensors" index, then a data
region of raw float32 row-major tensors at 64-byte-aligned offsets
relative to the region start. This must stay byte-compatible with the
inference runtime that consumes the files.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"STRV"
VERSION = 1
ALIGNMENT = 64
_HEADER = struct.Struct("<4sIQ")


class ContainerError(RuntimeError):
    pass


def tensor_crc32(arr: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(arr, dtype="<f4").tobytes()) & 0xFFFFFFFF


def write(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    metadata = dict(metadata or {})
    if "tensors" in metadata:
        raise ContainerError("metadata must not predefine the tensors index")
    blobs = []
    index = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        pad = (-offset) % ALIGNMENT
        offset += pad
        blobs.append(b"\x00" * pad + data)
        index.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": [int(s) for s in np.shape(arr)],
                "offset": offset,
                "nbytes": len(data),
            }
        )
        offset += len(data)
    metadata["tensors"] = index
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        for blob in blobs:
            fh.write(blob)


def read(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ContainerError(f"{path}: truncated header")
    magic, version, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    meta_end = _HEADER.size + meta_len
    metadata = json.loads(raw[_HEADER.size:meta_end].decode("utf-8"))
    data = raw[meta_end:]
    tensors = {}
    for rec in metadata["tensors"]:
        shape = tuple(int(s) for s in rec["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if rec["offset"] + rec["nbytes"] > len(data):
            raise ContainerError(f"{path}: tensor {rec['name']} truncated")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=rec["offset"]).reshape(shape)
        tensors[rec["name"]] = arr.copy()
    return tensors, metadata
