"""QSCK checkpoint files: named float64 arrays.

Layout (little-endian)::

    b"QSCK" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u8 rank | rank x u32 dim | f64 payload )
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from vcube.errors import FormatError

MAGIC = b"QSCK"
VERSION = 1


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > 255:
            raise ValueError(f"array {name!r} has rank {arr.ndim} > 255")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12:
        raise FormatError("file shorter than the QSCK header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported QSCK version {version}", 4)
    off = 12
    out: dict[str, np.ndarray] = {}

    def need(n: int, what: str):
        if off + n > len(buf):
            raise FormatError(f"truncated {what}", off)

    for _ in range(count):
        need(4, "name length")
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(nlen, "name")
        try:
            name = buf[off:off + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("array name is not valid UTF-8", off) from None
        off += nlen
        need(1, "rank")
        rank = buf[off]
        off += 1
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        need(nbytes, f"payload of {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off).astype(np.float64).reshape(dims)
        off += nbytes
    if off != len(buf):
        raise FormatError("trailing bytes after last array", off)
    return out


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(arrays))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
