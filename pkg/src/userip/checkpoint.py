"""Versioned binary container shared by every parameter checkpoint.

Layout: 4-byte magic, u16 version, u32 header length, UTF-8 JSON header,
concatenated little-endian float64 arrays in header order, 32-byte SHA-256 of
everything before it.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def atomic_write(path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    blob = _PREFIX.pack(magic, VERSION, len(head)) + head + body
    return blob + hashlib.sha256(blob).digest()


def write(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> str:
    blob = encode(magic, header, arrays)
    atomic_write(path, blob)
    return blob[-32:].hex()


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray], str]:
    """Return ``(header, arrays, sha256 hex)``; raises on any mismatch."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size + 32:
        raise CheckpointError(f"{path}: truncated")
    got_magic, version, hlen = _PREFIX.unpack_from(blob)
    if got_magic != magic:
        raise CheckpointError(f"{path}: expected magic {magic!r}, got {got_magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch")
    start = _PREFIX.size
    header = json.loads(blob[start:start + hlen])
    off = start + hlen
    arrays = {}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[spec["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(
            spec["shape"]).astype(np.float64)
        off += 8 * n
    if off != len(blob) - 32:
        raise CheckpointError(f"{path}: payload length does not match header")
    return header, arrays, blob[-32:].hex()


def file_checksum(path) -> str:
    """SHA-256 trailer of a container file."""
    blob = Path(path).read_bytes()
    return blob[-32:].hex()
