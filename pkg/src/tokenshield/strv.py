"""STRV binary tensor container.

Layout (little-endian throughout):

    bytes 0-3    ASCII magic "STRV"
    bytes 4-7    u32 version, currently 1
    bytes 8-15   u64 byte length of the metadata JSON
    then         UTF-8 JSON metadata
    then         data region: raw float32 row-major tensors

The metadata JSON carries a "tensors" index: a list of
{name, dtype: "f32", shape, offset, nbytes} records. Offsets are relative
to the start of the data region and are 64-byte aligned. Everything else
in the metadata (model config, export manifest, calibration fields) is
free-form and owned by the caller.

Model weights, reference profiles, patches, and dataset images all reuse
this one container.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"STRV"
VERSION = 1
ALIGNMENT = 64
_HEADER = struct.Struct("<4sIQ")


def tensor_crc32(arr: np.ndarray) -> int:
    """crc32 of a tensor's raw float32 little-endian bytes."""
    return zlib.crc32(np.ascontiguousarray(arr, dtype="<f4").tobytes()) & 0xFFFFFFFF


def write(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    """Write tensors plus caller metadata to an STRV file.

    Tensor order in the index follows the dict insertion order. The caller's
    metadata must not contain a "tensors" key; the index is generated here.
    """
    metadata = dict(metadata or {})
    if "tensors" in metadata:
        raise FormatError("metadata must not predefine the tensors index")

    blobs: list[bytes] = []
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
    """Read an STRV file; returns ({name: float32 array}, metadata)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc

    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    meta_end = _HEADER.size + meta_len
    if len(raw) < meta_end:
        raise FormatError(f"{path}: truncated metadata")
    try:
        metadata = json.loads(raw[_HEADER.size:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: metadata is not valid JSON: {exc}") from exc

    index = metadata.get("tensors")
    if not isinstance(index, list):
        raise FormatError(f"{path}: metadata lacks a tensors index")

    data = raw[meta_end:]
    tensors: dict[str, np.ndarray] = {}
    for rec in index:
        try:
            name, dtype = rec["name"], rec["dtype"]
            shape = tuple(int(s) for s in rec["shape"])
            offset, nbytes = int(rec["offset"]), int(rec["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed tensor record {rec!r}") from exc
        if dtype != "f32":
            raise FormatError(f"{path}: tensor {name}: unsupported dtype {dtype}")
        if offset % ALIGNMENT:
            raise FormatError(f"{path}: tensor {name}: offset {offset} not {ALIGNMENT}-byte aligned")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if nbytes != 4 * count:
            raise FormatError(f"{path}: tensor {name}: nbytes {nbytes} does not match shape {shape}")
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: tensor {name}: data region truncated")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[name] = arr.copy()
    return tensors, metadata
