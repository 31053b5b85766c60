"""Writer and independent verifier for the .bag instance-embedding format.

Layout, all little-endian: 4-byte magic ``MILE``; three uint32 fields
(version, N, D); N pairs of uint32 patch coordinates (x, y); then N*D
float32 embedding values, row-major.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

MAGIC = b"MILE"
VERSION = 1
_HEADER = struct.Struct("<III")


def write_bag(
    path: str | Path,
    embeddings: np.ndarray,
    coords: Sequence[tuple[int, int]],
) -> None:
    """Write one bag atomically (temp file plus rename). Deterministic bytes."""
    emb = np.asarray(embeddings)
    if emb.ndim != 2 or emb.shape[0] == 0 or emb.shape[1] == 0:
        raise ValidationError(f"embeddings must be a nonempty 2-D array, got shape {emb.shape}")
    if len(coords) != emb.shape[0]:
        raise ValidationError(f"{len(coords)} coordinates for {emb.shape[0]} embedding rows")
    if not np.isfinite(emb).all():
        raise ValidationError("embeddings contain non-finite values")
    n, d = emb.shape
    coord_arr = np.empty((n, 2), dtype="<u4")
    for i, (x, y) in enumerate(coords):
        if x < 0 or y < 0 or x > 0xFFFFFFFF or y > 0xFFFFFFFF:
            raise ValidationError(f"coordinate ({x}, {y}) outside the uint32 range")
        coord_arr[i, 0] = x
        coord_arr[i, 1] = y
    payload = b"".join(
        [
            MAGIC,
            _HEADER.pack(VERSION, n, d),
            coord_arr.tobytes(),
            np.ascontiguousarray(emb, dtype="<f4").tobytes(),
        ]
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


@dataclass
class RoundtripReport:
    path: str
    ok: bool
    n: int = 0
    d: int = 0
    issues: list[str] = field(default_factory=list)

    def summary(self) -> str:
        status = "OK" if self.ok else "MISMATCH"
        tail = f" ({'; '.join(self.issues)})" if self.issues else ""
        return f"{self.path}: {status} n={self.n} d={self.d}{tail}"


def verify_roundtrip(path: str | Path) -> RoundtripReport:
    """Re-read a bag with a struct-level parser and check the format contract.

    Deliberately shares no code with write_bag: header fields come from
    struct, the payload goes through array('f'), and the length check is
    exact so trailing garbage counts as a mismatch.
    """
    path = Path(path)
    report = RoundtripReport(path=str(path), ok=False)
    data = path.read_bytes()
    if len(data) < 16:
        report.issues.append(f"file holds {len(data)} bytes, header needs 16")
        return report
    if data[:4] != MAGIC:
        report.issues.append(f"magic {data[:4]!r} != {MAGIC!r}")
        return report
    version, n, d = _HEADER.unpack_from(data, 4)
    report.n, report.d = n, d
    if version != VERSION:
        report.issues.append(f"version {version} != {VERSION}")
    if n == 0:
        report.issues.append("zero embedding rows")
    if d == 0:
        report.issues.append("zero embedding width")
    if report.issues:
        return report
    expected = 16 + n * 8 + n * d * 4
    if len(data) != expected:
        report.issues.append(f"file holds {len(data)} bytes, header implies {expected}")
        return report
    values = struct.unpack_from(f"<{n * d}f", data, 16 + n * 8)
    bad = sum(1 for v in values if not math.isfinite(v))
    if bad:
        report.issues.append(f"{bad} non-finite embedding values")
        return report
    report.ok = True
    return report
