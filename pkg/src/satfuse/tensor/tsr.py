"""TSR1 tensor files: 8-byte magic, one JSON header line, raw little-endian data."""
from __future__ import annotations

import json
import os

import numpy as np

from satfuse.errors import FormatError

MAGIC = b"TSR1\0\0\0\0"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def dumps(arr) -> bytes:
    a = np.asarray(getattr(arr, "data", arr))
    if a.dtype == np.float64:
        tag = "f64"
    elif a.dtype == np.float32:
        tag = "f32"
    else:
        raise FormatError(f"TSR1 stores f32/f64 only, got {a.dtype}")
    header = json.dumps({"shape": list(a.shape), "dtype": tag, "byte_order": "LE"}, separators=(",", ":"))
    return MAGIC + header.encode() + b"\n" + np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:8] != MAGIC:
        raise FormatError("not a TSR1 file (bad magic)")
    nl = buf.find(b"\n", 8)
    if nl < 0:
        raise FormatError("TSR1 header line not terminated")
    try:
        header = json.loads(buf[8:nl])
        shape = tuple(int(s) for s in header["shape"])
        dt = _DTYPES[header["dtype"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed TSR1 header: {exc}") from exc
    if header.get("byte_order", "LE") != "LE":
        raise FormatError("TSR1 byte order must be LE")
    body = buf[nl + 1 :]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(body) != expected:
        raise FormatError(f"TSR1 payload is {len(body)} bytes, header implies {expected}")
    return np.frombuffer(body, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save(path: str | os.PathLike, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
