"""Persisted user -> profile-index feature bank.

File layout (little-endian): magic ``UIPB``, u16 version, u32 header length,
UTF-8 JSON header, then one record per user sorted by user id (u64 user id
followed by M u16 indices), then a CRC32 of everything before it.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write
from .quant import Assignment

MAGIC = b"UIPB"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class BankError(ValueError):
    """Base class for feature-bank file problems."""


class BankFormatError(BankError):
    pass


class BankVersionError(BankError):
    pass


class BankTruncatedError(BankError):
    pass


class BankRangeError(BankError):
    pass


class BankChecksumError(BankError):
    pass


class _Unknown:
    """Lookup outcome for a user absent from the bank."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "UNKNOWN"

    def __bool__(self):
        return False


UNKNOWN = _Unknown()


def _record_dtype(M: int) -> np.dtype:
    return np.dtype([("user", "<u8"), ("codes", "<u2", (M,))])


def encode(assignment: Assignment, meta: dict | None = None) -> bytes:
    sizes = [int(k) for k in assignment.sizes]
    if any(k > 65536 for k in sizes):
        raise ValueError("codebook sizes above 65536 do not fit 16-bit indices")
    M = len(sizes)
    order = np.argsort(assignment.user_ids, kind="stable")
    rec = np.zeros(len(order), dtype=_record_dtype(M))
    rec["user"] = assignment.user_ids[order]
    rec["codes"] = assignment.codes[order].reshape(len(order), M)
    header = {"format_version": VERSION, "M": M, "K": sizes, "n_records": len(rec),
              "record_bytes": rec.dtype.itemsize, **(meta or {})}
    head = json.dumps(header, sort_keys=True).encode()
    blob = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + rec.tobytes()
    return blob + struct.pack("<I", zlib.crc32(blob))


def write_bank(assignment: Assignment, path, meta: dict | None = None) -> str:
    """Atomically write the bank; returns its CRC32 as 8 hex digits."""
    meta = dict(meta or {})
    meta.setdefault("created_unix", int(time.time()))
    blob = encode(assignment, meta)
    atomic_write(path, blob)
    return blob[-4:][::-1].hex()


class FeatureBank:
    """Read-only in-memory bank with O(1) expected lookup."""

    def __init__(self, header: dict, user_ids: np.ndarray, codes: np.ndarray, crc: str):
        self.header = header
        self.M = int(header["M"])
        self.sizes = tuple(int(k) for k in header["K"])
        self.user_ids = user_ids
        self.codes = codes
        self.user_ids.setflags(write=False)
        self.codes.setflags(write=False)
        self.crc = crc
        self._index = {int(u): tuple(int(c) for c in row) for u, row in zip(user_ids, codes)}

    def __len__(self):
        return len(self._index)

    def __contains__(self, user_id) -> bool:
        return user_id in self._index

    def lookup(self, user_id):
        """Stored index tuple, or ``UNKNOWN`` for users not in the bank."""
        return self._index.get(user_id, UNKNOWN)

    def lookup_many(self, user_ids) -> np.ndarray:
        """``(n, M)`` indices; rows for unknown users are -1."""
        user_ids = np.asarray(user_ids, dtype=np.int64)
        out = np.full((len(user_ids), self.M), -1, dtype=np.int64)
        if len(self.user_ids) == 0:
            return out
        pos = np.searchsorted(self.user_ids, user_ids)
        pos = np.clip(pos, 0, len(self.user_ids) - 1)
        hit = self.user_ids[pos].astype(np.int64) == user_ids
        out[hit] = self.codes[pos[hit]]
        return out

    def as_assignment(self) -> Assignment:
        return Assignment(self.codes.astype(np.int64), self.sizes, self.user_ids.astype(np.int64))


def read_bank(path) -> FeatureBank:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size + 4:
        raise BankTruncatedError(f"{path}: {len(blob)} bytes is shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise BankFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise BankVersionError(f"{path}: version {version}, this reader supports {VERSION}")
    start = _PREFIX.size
    if len(blob) < start + hlen + 4:
        raise BankTruncatedError(f"{path}: header runs past end of file")
    try:
        header = json.loads(blob[start:start + hlen])
    except ValueError as exc:
        raise BankFormatError(f"{path}: unreadable header ({exc})") from None
    M, n = int(header["M"]), int(header["n_records"])
    dtype = _record_dtype(M)
    body = start + hlen
    expect = body + n * dtype.itemsize + 4
    if len(blob) != expect:
        kind = BankTruncatedError if len(blob) < expect else BankFormatError
        raise kind(f"{path}: expected {expect} bytes for {n} records, found {len(blob)}")
    rec = np.frombuffer(blob, dtype=dtype, count=n, offset=body)
    codes = rec["codes"].reshape(n, M).astype(np.int64)
    for m, k in enumerate(header["K"]):
        bad = np.flatnonzero(codes[:, m] >= k)
        if len(bad):
            raise BankRangeError(f"{path}: record {bad[0]} profile {m} index "
                                 f"{codes[bad[0], m]} >= K={k}")
    users = rec["user"].astype(np.int64)
    if n > 1 and np.any(np.diff(users) <= 0):
        raise BankFormatError(f"{path}: records not strictly sorted by user id")
    crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != crc:
        raise BankChecksumError(f"{path}: CRC32 mismatch")
    return FeatureBank(header, users, codes, f"{crc:08x}")
