"""Teacher record (``TSE1``) writing and validation.

Little-endian layout: header = magic ``TSE1``, u32 version, u32 Dt,
u32 window radius, u64 record count, 16-byte vocabulary digest; each record
= u64 position key, u32 center word id, u8 vector count m, then m entries
of (i8 offset, u32 word id, Dt f32 values).  The record count is patched
into the header after streaming.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

MAGIC = b"TSE1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ16s")
_REC_HEAD = struct.Struct("<QIB")
_ENTRY_HEAD = struct.Struct("<bI")


@dataclass
class Record:
    key: int
    center: int
    offsets: list[int]
    word_ids: list[int]
    vectors: np.ndarray  # (m, Dt) float32


class RecordWriter:
    """Streams records to disk; call :meth:`close` to patch the count."""

    def __init__(self, path: str | Path, dim: int, delta: int, vocab_digest: bytes):
        self.path = Path(path)
        self.dim = dim
        self.delta = delta
        self.count = 0
        self._f = open(self.path, "wb")
        self._f.write(_HEADER.pack(MAGIC, VERSION, dim, delta, 0, vocab_digest))

    def write(self, rec: Record) -> None:
        m = len(rec.vectors)
        if m > 255:
            raise ValueError("record has more than 255 vectors")
        self._f.write(_REC_HEAD.pack(rec.key, rec.center, m))
        vecs = np.ascontiguousarray(rec.vectors, dtype="<f4")
        for off, wid, vec in zip(rec.offsets, rec.word_ids, vecs):
            self._f.write(_ENTRY_HEAD.pack(int(off), int(wid)))
            self._f.write(vec.tobytes())
        self.count += 1

    def close(self) -> None:
        self._f.seek(16)  # the u64 count sits after magic, version, Dt, delta
        self._f.write(struct.pack("<Q", self.count))
        self._f.close()

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class ValidationReport:
    records: int = 0
    vectors: int = 0
    dim: int = 0
    delta: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def iter_records(data: bytes, dim: int, delta: int, count: int) -> Iterator[Record]:
    pos = _HEADER.size
    vec_bytes = 4 * dim
    for i in range(count):
        if pos + _REC_HEAD.size > len(data):
            raise ValueError(f"truncated at record {i}")
        key, center, m = _REC_HEAD.unpack_from(data, pos)
        pos += _REC_HEAD.size
        if pos + m * (_ENTRY_HEAD.size + vec_bytes) > len(data):
            raise ValueError(f"truncated at record {i}")
        offsets, word_ids = [], []
        vectors = np.empty((m, dim), dtype=np.float32)
        for j in range(m):
            off, wid = _ENTRY_HEAD.unpack_from(data, pos)
            pos += _ENTRY_HEAD.size
            offsets.append(off)
            word_ids.append(wid)
            vectors[j] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
            pos += vec_bytes
        yield Record(key, center, offsets, word_ids, vectors)
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes")


def validate(path: str | Path, vocab_digest: bytes, vocab_size: int) -> ValidationReport:
    """Full integrity pass; collects violations instead of raising."""
    report = ValidationReport()
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        report.violations.append("file shorter than header")
        return report
    magic, version, dim, delta, count, digest = _HEADER.unpack_from(data, 0)
    report.dim, report.delta = dim, delta
    if magic != MAGIC:
        report.violations.append(f"bad magic {magic!r}")
        return report
    if version != VERSION:
        report.violations.append(f"unsupported version {version}")
        return report
    if digest != vocab_digest:
        report.violations.append("vocabulary digest mismatch")
        return report
    try:
        for i, rec in enumerate(iter_records(data, dim, delta, count)):
            report.records += 1
            report.vectors += len(rec.vectors)
            if len(rec.vectors) == 0:
                report.violations.append(f"record {i}: empty")
                return report
            if 0 not in rec.offsets:
                report.violations.append(f"record {i}: no center vector")
                return report
            if any(abs(o) > delta for o in rec.offsets):
                report.violations.append(f"record {i}: offset out of range")
                return report
            if rec.center >= vocab_size or any(w >= vocab_size for w in rec.word_ids):
                report.violations.append(f"record {i}: word id out of range")
                return report
            if rec.word_ids[rec.offsets.index(0)] != rec.center:
                report.violations.append(f"record {i}: center id mismatch")
                return report
            if not np.isfinite(rec.vectors).all():
                report.violations.append(f"record {i}: non-finite vector")
                return report
    except ValueError as e:
        report.violations.append(f"record {report.records}: {e}")
    return report
