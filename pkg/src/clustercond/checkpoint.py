"""Versioned binary container used by model checkpoints.

Layout (little-endian)::

    magic      4 bytes   b"CCTM" (TEMI) or b"CCDM" (diffusion)
    version    u32
    dtype      u8        4 -> float32, 8 -> float64
    meta_len   u32
    meta       meta_len bytes of UTF-8 JSON (config block + tensor manifest)
    tensors    concatenated in manifest order, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

_HEAD = struct.Struct("<4sIBI")
_DTYPES = {4: "<f4", 8: "<f8"}


def write_blob(path, magic: bytes, version: int, meta: dict, tensors: dict, width: int = 4) -> None:
    dtype = _DTYPES[width]
    manifest = [[name, list(np.shape(t))] for name, t in tensors.items()]
    body = json.dumps({"config": meta, "tensors": manifest}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_HEAD.pack(magic, version, width, len(body)))
        f.write(body)
        for t in tensors.values():
            f.write(np.ascontiguousarray(t, dtype=dtype).tobytes())


def read_blob(path, magic: bytes, version: int) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise DataError(f"{path}: truncated checkpoint header")
    got, ver, width, n = _HEAD.unpack_from(raw, 0)
    if got != magic:
        raise DataError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if ver != version:
        raise DataError(f"{path}: unsupported checkpoint version {ver}")
    if width not in _DTYPES:
        raise DataError(f"{path}: bad dtype width {width}")
    off = _HEAD.size
    doc = json.loads(raw[off : off + n].decode())
    off += n
    tensors = {}
    for name, shape in doc["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = off + width * count
        if end > len(raw):
            raise DataError(f"{path}: tensor {name!r} truncated at byte {len(raw)}")
        arr = np.frombuffer(raw, dtype=_DTYPES[width], count=count, offset=off)
        tensors[name] = arr.reshape(shape).astype(np.float64)
        off = end
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")
    return doc["config"], tensors
