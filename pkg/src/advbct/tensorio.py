"""Versioned little-endian tensor container shared by checkpoints and geometry.

Layout::

    b"ABCT" | u32 version | repeated { u32 name_len | name (utf-8)
                                      | u32 rows | u32 cols
                                      | rows*cols little-endian float64 }

Tensors are read until end of file.  Vectors are stored as ``n x 1``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ABCT"
VERSION = 1


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise FormatError(f"tensor {name!r} has {arr.ndim} dims")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<II", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("not an ABCT tensor file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = 8
    tensors: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise FormatError("truncated tensor name")
            pos += name_len
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            nbytes = 8 * rows * cols
            if pos + nbytes > len(blob):
                raise FormatError(f"truncated data for tensor {name!r}")
            arr = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos)
            tensors[name] = arr.astype(np.float64).reshape(rows, cols)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated tensor file: {exc}") from exc
    return tensors


def save(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
