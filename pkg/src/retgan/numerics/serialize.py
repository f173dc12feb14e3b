"""Named-tensor container ("NTCK").

Layout, little-endian throughout::

    b"NTCK" | version u32 | entry count u32
    per entry: name length u16 | name utf-8 | dtype u8 (0=f64, 1=u32) |
               rank u8 | dims u32 * rank | payload
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"NTCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u4")}


class FormatError(ValueError):
    pass


def _code(arr: np.ndarray) -> int:
    if arr.dtype.kind == "f":
        return 0
    if arr.dtype.kind in "ui":
        return 1
    raise FormatError(f"unsupported dtype {arr.dtype}")


def dumps_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        code = _code(arr)
        if code == 1 and arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
            raise FormatError(f"{name}: integer values do not fit in u32")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def loads_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError("not an NTCK container (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported NTCK version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(dims)
        pos += n * dt.itemsize
        out[name] = arr.astype(np.float64 if code == 0 else np.uint32)
    return out


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps_tensors(tensors))
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads_tensors(fh.read())


def encode_text(s: str) -> np.ndarray:
    """Pack a string as a u32 byte vector for storage alongside tensors."""
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.uint32)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")
