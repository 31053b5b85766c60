"""Corpus data model: slide manifests, embedding bags, nucleus label masks.

File formats owned here:

* ``.bag``: binary, little-endian. Header is 4 ASCII magic bytes ``MILE``,
  a uint32 version (currently 1), uint32 N (patch count) and uint32 D
  (embedding width). Then N coordinate records (uint32 x, uint32 y),
  then N*D IEEE-754 binary32 values, row-major.
* Manifest: CSV with header ``slide_id,label,embedding_path,mask_dir,
  thumbnail_path``; UTF-8, LF or CRLF.
* Label masks: binary PGM (P5), 8- or 16-bit, one file per patch named
  ``<slide_id>_<x>_<y>.pgm``; 0 is background, k >= 1 is nucleus k.

All readers are pure functions of file content and every returned value
is safe to share across workers.
"""

from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import netpbm
from .errors import (
    CorruptionError,
    EmptyBagError,
    FileFormatError,
    ValidationError,
)

BAG_MAGIC = b"MILE"
BAG_VERSION = 1

MANIFEST_COLUMNS = ("slide_id", "label", "embedding_path", "mask_dir", "thumbnail_path")


class SubtypeLabel(enum.IntEnum):
    """The two cell-of-origin classes. Integer codes are stable across runs."""

    ABC = 0
    GCB = 1

    @classmethod
    def parse(cls, token: str) -> "SubtypeLabel":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise ValidationError(f"unknown subtype label {token!r} (expected ABC or GCB)") from None


@dataclass(frozen=True, order=True)
class PatchRef:
    """Level-0 pixel coordinates of one patch (top-left corner)."""

    x: int
    y: int
    size: int = 256

    def __post_init__(self) -> None:
        if self.x < 0 or self.y < 0:
            raise ValidationError(f"patch coordinates must be non-negative, got ({self.x}, {self.y})")
        if self.size <= 0:
            raise ValidationError(f"patch size must be positive, got {self.size}")


@dataclass
class SlideBag:
    """One whole-slide image as an ordered set of patch embeddings."""

    slide_id: str
    patches: list[PatchRef]
    embeddings: np.ndarray  # (N, D) float32
    label: Optional[SubtypeLabel] = None

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def validate(self) -> None:
        emb = self.embeddings
        if emb.ndim != 2:
            raise ValidationError(f"embeddings must be a 2-D matrix, got ndim={emb.ndim}")
        if len(self.patches) == 0 or emb.shape[0] == 0:
            raise EmptyBagError(f"bag {self.slide_id!r} has no patches")
        if emb.shape[0] != len(self.patches):
            raise ValidationError(
                f"bag {self.slide_id!r}: {len(self.patches)} patches but {emb.shape[0]} embedding rows"
            )
        if not np.isfinite(emb).all():
            raise ValidationError(f"bag {self.slide_id!r} contains non-finite embedding entries")


@dataclass
class LabelMask:
    """Instance-labelled nucleus mask; 0 is background."""

    labels: np.ndarray  # (H, W) unsigned integer

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    def nucleus_ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids > 0]

    def nucleus_count(self) -> int:
        return int(self.nucleus_ids().size)


@dataclass(frozen=True)
class ManifestRow:
    slide_id: str
    label: SubtypeLabel
    embedding_path: Path
    mask_dir: Optional[Path] = None
    thumbnail_path: Optional[Path] = None


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)

    def __iter__(self) -> Iterator[ManifestRow]:
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def slide_ids(self) -> list[str]:
        return [r.slide_id for r in self.rows]

    def class_counts(self) -> dict[SubtypeLabel, int]:
        counts = {SubtypeLabel.ABC: 0, SubtypeLabel.GCB: 0}
        for r in self.rows:
            counts[r.label] += 1
        return counts


def write_embedding_file(bag: SlideBag, path: str | Path) -> None:
    """Serialize a bag to the ``.bag`` binary layout. Deterministic bytes."""
    bag.validate()
    emb = np.ascontiguousarray(bag.embeddings, dtype="<f4")
    n, d = emb.shape
    parts = [BAG_MAGIC, struct.pack("<III", BAG_VERSION, n, d)]
    coords = np.empty((n, 2), dtype="<u4")
    for i, p in enumerate(bag.patches):
        coords[i, 0] = p.x
        coords[i, 1] = p.y
    parts.append(coords.tobytes())
    parts.append(emb.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_embedding_file(path: str | Path, patch_size: int = 256) -> SlideBag:
    """Read a ``.bag`` file back into a SlideBag.

    The slide id is taken from the file stem; the manifest is the
    authority when one is available.
    """
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16:
        raise FileFormatError(f"{path.name}: too short for a bag header")
    if data[:4] != BAG_MAGIC:
        raise FileFormatError(f"{path.name}: bad magic {data[:4]!r}")
    version, n, d = struct.unpack_from("<III", data, 4)
    if version != BAG_VERSION:
        raise FileFormatError(f"{path.name}: unsupported bag version {version}")
    if n == 0:
        raise EmptyBagError(f"{path.name}: bag holds zero patches")
    if d == 0:
        raise FileFormatError(f"{path.name}: embedding width is zero")
    expected = 16 + n * 8 + n * d * 4
    if len(data) < expected:
        raise CorruptionError(
            f"{path.name}: header claims {n}x{d} but only {len(data)} of {expected} bytes present"
        )
    coords = np.frombuffer(data, dtype="<u4", count=2 * n, offset=16).reshape(n, 2)
    emb = np.frombuffer(data, dtype="<f4", count=n * d, offset=16 + n * 8).reshape(n, d).copy()
    if not np.isfinite(emb).all():
        raise CorruptionError(f"{path.name}: non-finite embedding entries")
    patches = [PatchRef(int(x), int(y), patch_size) for x, y in coords]
    return SlideBag(slide_id=path.stem, patches=patches, embeddings=emb)


def read_label_mask(path: str | Path) -> LabelMask:
    """Read a PGM label mask; 16-bit IDs survive the round trip."""
    return LabelMask(labels=netpbm.read_pgm(path))


def write_label_mask(mask: LabelMask, path: str | Path) -> None:
    netpbm.write_pgm(path, mask.labels)


def mask_filename(slide_id: str, x: int, y: int) -> str:
    return f"{slide_id}_{x}_{y}.pgm"


def read_manifest(path: str | Path, check_files: bool = False) -> Manifest:
    """Parse a manifest CSV. Paths are resolved relative to the CSV's directory.

    Labels are accepted case-insensitively. Duplicate slide ids and
    unknown labels are validation errors; with ``check_files`` the
    referenced embedding files must also exist.
    """
    path = Path(path)
    base = path.parent
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError(f"{path.name}: empty manifest") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise FileFormatError(
                f"{path.name}: manifest header must be {','.join(MANIFEST_COLUMNS)}"
            )
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(MANIFEST_COLUMNS):
                raise ValidationError(f"{path.name}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns")
            slide_id = rec[0].strip()
            if not slide_id:
                raise ValidationError(f"{path.name}:{lineno}: empty slide_id")
            if slide_id in seen:
                raise ValidationError(f"{path.name}:{lineno}: duplicate slide_id {slide_id!r}")
            seen.add(slide_id)
            label = SubtypeLabel.parse(rec[1])
            emb_path = base / rec[2].strip()
            mask_dir = base / rec[3].strip() if rec[3].strip() else None
            thumb = base / rec[4].strip() if rec[4].strip() else None
            rows.append(ManifestRow(slide_id, label, emb_path, mask_dir, thumb))
    if check_files:
        for r in rows:
            if not r.embedding_path.is_file():
                raise ValidationError(f"manifest references missing embedding file {r.embedding_path}")
    return Manifest(rows=rows)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest CSV with paths relative to the CSV's directory."""
    path = Path(path)
    base = path.parent

    def rel(p: Optional[Path]) -> str:
        if p is None:
            return ""
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.rows:
            writer.writerow([r.slide_id, r.label.name, rel(r.embedding_path), rel(r.mask_dir), rel(r.thumbnail_path)])


def load_bags(manifest: Manifest) -> dict[str, SlideBag]:
    """Materialize every bag in a manifest, attaching labels and ids."""
    bags: dict[str, SlideBag] = {}
    for row in manifest:
        bag = read_embedding_file(row.embedding_path)
        bag.slide_id = row.slide_id
        bag.label = row.label
        bags[row.slide_id] = bag
    return bags
