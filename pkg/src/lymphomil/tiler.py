"""Slide tiling: tissue detection, fixed-grid patching, white-patch and
low-cellularity rejection.

Input is an RGB matrix at the working magnification; tiling is a plain
non-overlapping grid, and the trailing remainder that does not fill a
whole patch is dropped. Rejection order per grid cell: background
(under half the pixels are tissue), then white, then low cellularity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .datamodel import LabelMask, PatchRef
from .errors import ValidationError

REASON_KEPT = "kept"
REASON_BACKGROUND = "background"
REASON_WHITE = "white"
REASON_LOW_CELLULARITY = "low_cellularity"

PATCH_CSV_COLUMNS = ("slide_id", "x", "y", "kept", "reason")


@dataclass(frozen=True)
class TilingConfig:
    patch_size: int = 256
    white_mean_threshold: float = 220.0
    white_fraction_threshold: float = 0.9
    tissue_saturation_threshold: float = 0.05
    min_nuclei_exclusive: int = 10

    def __post_init__(self) -> None:
        if self.patch_size <= 0:
            raise ValidationError("patch_size must be positive")
        if not 0.0 <= self.white_mean_threshold <= 255.0:
            raise ValidationError("white_mean_threshold must be in [0, 255]")
        if not 0.0 <= self.white_fraction_threshold <= 1.0:
            raise ValidationError("white_fraction_threshold must be in [0, 1]")
        if not 0.0 <= self.tissue_saturation_threshold <= 1.0:
            raise ValidationError("tissue_saturation_threshold must be in [0, 1]")
        if self.min_nuclei_exclusive < 0:
            raise ValidationError("min_nuclei_exclusive must be non-negative")


@dataclass
class TileReport:
    total_grid: int = 0
    kept: int = 0
    rejected_white: int = 0
    rejected_low_cellularity: int = 0
    rejected_background: int = 0

    def check(self) -> None:
        rejected = self.rejected_white + self.rejected_low_cellularity + self.rejected_background
        if self.kept + rejected != self.total_grid:
            raise ValidationError("tile report counts do not add up")


def detect_tissue(image: np.ndarray, cfg: TilingConfig = TilingConfig()) -> np.ndarray:
    """Boolean tissue mask: HSV saturation at or above the threshold.

    Saturation is (max - min) / max over the RGB channels, zero for
    black pixels, so both pure white and pure black count as background.
    """
    if image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        raise ValidationError("image must be a non-empty (H, W, 3) RGB matrix")
    pix = image.astype(np.float64)
    cmax = pix.max(axis=2)
    cmin = pix.min(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        sat = np.where(cmax > 0, (cmax - cmin) / np.where(cmax > 0, cmax, 1.0), 0.0)
    return sat >= cfg.tissue_saturation_threshold


def grid_patches(
    image_extent: tuple[int, int],
    tissue: np.ndarray,
    cfg: TilingConfig = TilingConfig(),
) -> list[PatchRef]:
    """Non-overlapping grid cells with at least half their pixels tissue.

    ``image_extent`` is (W, H); returned in row-major (y, then x) order.
    An extent smaller than one patch yields an empty list.
    """
    w, h = image_extent
    ps = cfg.patch_size
    if tissue.shape != (h, w):
        raise ValidationError(f"tissue mask shape {tissue.shape} does not match extent {(h, w)}")
    out = []
    half = ps * ps / 2.0
    for y in range(0, h - ps + 1, ps):
        for x in range(0, w - ps + 1, ps):
            if tissue[y : y + ps, x : x + ps].sum() >= half:
                out.append(PatchRef(x=x, y=y, size=ps))
    return out


def is_white_patch(patch: np.ndarray, cfg: TilingConfig = TilingConfig()) -> bool:
    """True iff the bright-pixel fraction strictly exceeds the threshold."""
    means = patch.astype(np.float64).mean(axis=2)
    fraction = float((means >= cfg.white_mean_threshold).mean())
    return fraction > cfg.white_fraction_threshold


def passes_cellularity(mask: LabelMask, cfg: TilingConfig = TilingConfig()) -> bool:
    """True iff the patch holds strictly more nuclei than the cutoff."""
    return mask.nucleus_count() > cfg.min_nuclei_exclusive


def _label_components(binary: np.ndarray) -> int:
    """Count 8-connected components of a boolean matrix."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    count = 0
    neighbors = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    for sy in range(h):
        row = binary[sy]
        for sx in range(w):
            if not row[sx] or seen[sy, sx]:
                continue
            count += 1
            stack = [(sy, sx)]
            seen[sy, sx] = True
            while stack:
                cy, cx = stack.pop()
                for dy, dx in neighbors:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
    return count


def estimate_nucleus_count(patch: np.ndarray) -> int:
    """Stand-in nucleus count when no label mask exists.

    Hematoxylin-stained nuclei read blue-dominant and dark; counts
    8-connected components of that pixel class.
    """
    pix = patch.astype(np.int64)
    r, g, b = pix[..., 0], pix[..., 1], pix[..., 2]
    nucleus_like = (b > r) & (b > g) & (pix.mean(axis=2) < 180)
    return _label_components(nucleus_like)


@dataclass
class TileOutcome:
    ref: PatchRef
    kept: bool
    reason: str


def tile_image(
    image: np.ndarray,
    cfg: TilingConfig = TilingConfig(),
    mask_lookup: Optional[Callable[[int, int], Optional[LabelMask]]] = None,
) -> tuple[list[TileOutcome], TileReport]:
    """Full per-slide pipeline over one RGB image.

    ``mask_lookup`` maps patch (x, y) to its label mask when one exists;
    otherwise the color-threshold nucleus estimate is used.
    """
    h, w = image.shape[0], image.shape[1]
    ps = cfg.patch_size
    tissue = detect_tissue(image, cfg)
    report = TileReport()
    outcomes = []
    tissue_ok = {(p.x, p.y) for p in grid_patches((w, h), tissue, cfg)}
    for y in range(0, h - ps + 1, ps):
        for x in range(0, w - ps + 1, ps):
            report.total_grid += 1
            ref = PatchRef(x=x, y=y, size=ps)
            if (x, y) not in tissue_ok:
                report.rejected_background += 1
                outcomes.append(TileOutcome(ref, False, REASON_BACKGROUND))
                continue
            patch = image[y : y + ps, x : x + ps]
            if is_white_patch(patch, cfg):
                report.rejected_white += 1
                outcomes.append(TileOutcome(ref, False, REASON_WHITE))
                continue
            mask = mask_lookup(x, y) if mask_lookup is not None else None
            if mask is not None:
                ok = passes_cellularity(mask, cfg)
            else:
                ok = estimate_nucleus_count(patch) > cfg.min_nuclei_exclusive
            if not ok:
                report.rejected_low_cellularity += 1
                outcomes.append(TileOutcome(ref, False, REASON_LOW_CELLULARITY))
                continue
            report.kept += 1
            outcomes.append(TileOutcome(ref, True, REASON_KEPT))
    report.check()
    return outcomes, report


def write_patch_csv(path: str | Path, slide_id: str, outcomes: Sequence[TileOutcome]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PATCH_CSV_COLUMNS)
        for o in outcomes:
            writer.writerow([slide_id, o.ref.x, o.ref.y, int(o.kept), o.reason])
