"""Binary tensor container: a flat, order-preserving name -> float32 array file.

Layout (all integers little-endian):
    magic      4 bytes  b"FPK1"
    version    u16      currently 1
    count      u16      number of tensors
    per tensor:
        name_len  u16
        name      utf-8 bytes
        rank      u8
        dims      u32 * rank
        payload   f32 * prod(dims), row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"FPK1"
VERSION = 1

_MAX_U16 = 0xFFFF


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]):
    """Write named arrays to ``path``; values are cast to little-endian float32."""
    if len(tensors) > _MAX_U16:
        raise FormatError("count", f"too many tensors ({len(tensors)})")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", VERSION, len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            name_bytes = name.encode("utf-8")
            if len(name_bytes) > _MAX_U16:
                raise FormatError("name", f"name too long: {name!r}")
            if data.ndim > 0xFF:
                raise FormatError("rank", f"rank {data.ndim} exceeds u8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes(order="C"))


def _read_exact(fh, n: int, field: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(field, f"truncated file (expected {n} bytes, got {len(data)})")
    return data


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container back into an ordered name -> float32 array dict."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise FormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
        version, count = struct.unpack("<HH", _read_exact(fh, 4, "header"))
        if version != VERSION:
            raise FormatError("version", f"unsupported version {version}")
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name_len"))
            try:
                name = _read_exact(fh, name_len, "name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError("name", f"invalid utf-8 in tensor #{i}") from exc
            if name in out:
                raise FormatError("name", f"duplicate tensor name {name!r}")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims")) if rank else ()
            n_elem = 1
            for d in dims:
                n_elem *= d
            payload = _read_exact(fh, 4 * n_elem, f"payload[{name}]")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing", "unexpected bytes after last tensor")
    return out
