"""Binary tensor container and named-tensor manifests.

Single tensor record:

    magic   4 bytes  b"DBLT"
    version u8       currently 1
    rank    u8
    dims    rank * u64 little-endian
    payload row-major float64 little-endian

A manifest is a u32 little-endian entry count followed by entries of
(u16 LE name length, UTF-8 name, tensor record). Checkpoints are
manifests; writers go through a temp file + rename so readers never see
a torn file.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from typing import BinaryIO

import numpy as np

MAGIC = b"DBLT"
VERSION = 1
_MAX_RANK = 16

__all__ = [
    "MAGIC",
    "VERSION",
    "write_tensor",
    "read_tensor",
    "tensor_bytes",
    "write_manifest",
    "read_manifest",
]


def tensor_bytes(arr: np.ndarray) -> bytes:
    """Serialize one array as a tensor record."""
    arr = np.asarray(arr, dtype=float)
    if arr.ndim > _MAX_RANK:
        raise ValueError(f"rank {arr.ndim} exceeds container limit {_MAX_RANK}")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return header + dims + payload


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated container while reading {what}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    """Read one tensor record from a binary stream."""
    magic = _read_exact(fh, 4, "magic")
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<BB", _read_exact(fh, 2, "header"))
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    if rank > _MAX_RANK:
        raise ValueError(f"rank {rank} exceeds container limit {_MAX_RANK}")
    if rank:
        dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "dims"))
    else:
        dims = ()
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(fh, 8 * count, "payload")
    arr = np.frombuffer(payload, dtype="<f8").astype(float)
    return arr.reshape(dims)


def atomic_write_bytes(path: str | os.PathLike, blob: bytes) -> None:
    """Write a blob via a sibling temp file and an atomic rename."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".dblt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    """Write one tensor to a file atomically."""
    atomic_write_bytes(path, tensor_bytes(arr))


def write_manifest(path: str | os.PathLike, entries: dict[str, np.ndarray]) -> None:
    """Write a named-tensor manifest atomically, preserving entry order."""
    if len(entries) > 0xFFFFFFFF:
        raise ValueError("too many manifest entries")
    out = io.BytesIO()
    out.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:32]}...")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(tensor_bytes(arr))
    atomic_write_bytes(path, out.getvalue())


def read_manifest(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read a named-tensor manifest, preserving entry order."""
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            if name in entries:
                raise ValueError(f"duplicate manifest entry {name!r}")
            entries[name] = read_tensor(fh)
        trailing = fh.read(1)
        if trailing:
            raise ValueError("trailing bytes after final manifest entry")
    return entries


def read_tensor_file(path: str | os.PathLike) -> np.ndarray:
    """Read a single-tensor file, rejecting trailing bytes."""
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise ValueError("trailing bytes after tensor payload")
    return arr
