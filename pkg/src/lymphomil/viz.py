"""Attention visualization: per-slide heatmap overlays and top-k patch
selection.

Scores are min-max normalized per slide and branch; a degenerate range
(all scores equal, or a single patch) maps to 0.5. The overlay colormap
is a straight blue-to-red lerp blended at alpha 0.5, all channel math
rounded half-up so the output bytes are reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import PatchRef
from .errors import ValidationError


@dataclass(frozen=True)
class AttentionEntry:
    patch_ref: PatchRef
    raw: tuple[float, float]  # both branch scores
    normalized: float  # for the map's branch, in [0, 1]


@dataclass
class AttentionMap:
    slide_id: str
    branch: int
    entries: list[AttentionEntry]


def normalize_attention(A: np.ndarray, branch: int) -> np.ndarray:
    """Min-max normalize one branch's scores; flat input maps to 0.5."""
    if A.ndim != 2 or A.shape[0] < 1:
        raise ValidationError("attention matrix must be non-empty (N, branches)")
    if not 0 <= branch < A.shape[1]:
        raise ValidationError(f"branch {branch} out of range")
    col = A[:, branch].astype(np.float64)
    lo = col.min()
    hi = col.max()
    if hi == lo:
        return np.full(col.shape, 0.5)
    return (col - lo) / (hi - lo)


def build_attention_map(
    slide_id: str, patches: Sequence[PatchRef], A: np.ndarray, branch: int
) -> AttentionMap:
    if len(patches) != A.shape[0]:
        raise ValidationError(f"{len(patches)} patches but {A.shape[0]} attention rows")
    normalized = normalize_attention(A, branch)
    entries = [
        AttentionEntry(
            patch_ref=p,
            raw=(float(A[i, 0]), float(A[i, 1])),
            normalized=float(normalized[i]),
        )
        for i, p in enumerate(patches)
    ]
    return AttentionMap(slide_id=slide_id, branch=branch, entries=entries)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.uint8)


def heat_color(normalized: float) -> tuple[int, int, int]:
    """Linear blue (0,0,255) to red (255,0,0) by normalized score."""
    r = int(np.floor(255.0 * normalized + 0.5))
    b = int(np.floor(255.0 * (1.0 - normalized) + 0.5))
    return r, 0, b


def render_heatmap(
    amap: AttentionMap, thumbnail: np.ndarray, downscale: int
) -> np.ndarray:
    """Alpha-blend each patch footprint onto a copy of the thumbnail.

    A footprint is the patch rectangle divided by ``downscale``; pixels
    outside every footprint are returned byte-identical.
    """
    if thumbnail.ndim != 3 or thumbnail.shape[2] != 3:
        raise ValidationError("thumbnail must be an (H, W, 3) RGB matrix")
    if downscale < 1:
        raise ValidationError("downscale must be >= 1")
    out = thumbnail.copy()
    th, tw = out.shape[0], out.shape[1]
    for entry in amap.entries:
        p = entry.patch_ref
        x0 = p.x // downscale
        y0 = p.y // downscale
        x1 = (p.x + p.size) // downscale
        y1 = (p.y + p.size) // downscale
        if x1 > tw or y1 > th:
            raise ValidationError(
                f"patch ({p.x},{p.y}) footprint exceeds the {tw}x{th} thumbnail"
            )
        overlay = np.array(heat_color(entry.normalized), dtype=np.float64)
        region = out[y0:y1, x0:x1].astype(np.float64)
        out[y0:y1, x0:x1] = _round_half_up(0.5 * region + 0.5 * overlay)
    return out


def top_k_patches(amap: AttentionMap, k: int = 10) -> list[PatchRef]:
    """The k highest-attention patches, ties broken by (y, x) ascending."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    ranked = sorted(
        amap.entries,
        key=lambda e: (-e.normalized, e.patch_ref.y, e.patch_ref.x),
    )
    return [e.patch_ref for e in ranked[:k]]


def write_top_k_csv(path: str | Path, amap: AttentionMap, k: int = 10) -> None:
    by_ref = {(e.patch_ref.x, e.patch_ref.y): e for e in amap.entries}
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["slide_id", "rank", "x", "y", "normalized_score"])
        for rank, ref in enumerate(top_k_patches(amap, k), start=1):
            entry = by_ref[(ref.x, ref.y)]
            writer.writerow([amap.slide_id, rank, ref.x, ref.y, repr(entry.normalized)])
