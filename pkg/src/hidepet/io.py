"""Binary tensor container used for checkpoints and saved learner state.

Layout (all little-endian): magic "HIDEPET1" (8 bytes), u32 version, u32
tensor count, then per tensor: u16 name length, UTF-8 name, u8 rank, u64
dims[rank], raw float32 row-major payload. Tensors are written in sorted name
order so identical content always produces identical bytes.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, UnsupportedVersionError

MAGIC = b"HIDEPET1"
VERSION = 1


def write_tensors(path, named: dict) -> None:
    """Write named float arrays to `path`. Rejects non-finite values."""
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(named))]
    for name in sorted(named):
        arr = np.ascontiguousarray(np.asarray(named[name]), dtype="<f4")
        if not np.isfinite(arr).all():
            raise NumericError(f"refusing to persist non-finite tensor {name!r}")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict:
    """Read a tensor container back into {name: float32 ndarray}."""
    data = Path(path).read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"truncated while reading {what}", offset=off)
        piece = data[off : off + n]
        off += n
        return piece

    magic = take(8, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version > VERSION:
        raise UnsupportedVersionError(
            f"file declares version {version}, newest supported is {VERSION}", offset=8
        )
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of {name}"))
        n_items = 1
        for d in dims:
            n_items *= d
        payload = take(4 * n_items, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after last tensor", offset=off)
    return out


def content_hash(named: dict) -> str:
    """sha256 over sorted (name, float32 bytes); stable across processes."""
    h = hashlib.sha256()
    for name in sorted(named):
        arr = np.ascontiguousarray(np.asarray(named[name]), dtype="<f4")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
