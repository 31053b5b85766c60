"""Deterministic synthetic corpus generator.

Produces a desk-scale dataset exercising every file format: embedding
bags on a patch grid, instance label masks of rasterized ellipses with
matching RGB patch images, per-slide thumbnails, and a manifest tying
them together.

Class separation is planted in embedding space: GCB bags add
``signal_strength`` times a fixed unit vector to a random subset of
their rows; ABC bags are pure noise. Signal strength 0 yields an
unlearnable corpus. Nucleus sizes also differ slightly by class so the
morphometry comparison has a direction to find.

Every byte is a pure function of (seed, parameters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from .datamodel import (
    LabelMask,
    Manifest,
    ManifestRow,
    PatchRef,
    SlideBag,
    SubtypeLabel,
    mask_filename,
    write_embedding_file,
    write_label_mask,
    write_manifest,
)
from .errors import ValidationError

THUMB_DOWNSCALE = 32
PATCH_SIZE = 256

BACKGROUND_RGB = (231, 196, 206)  # eosin-like pink, not white, clearly saturated
NUCLEUS_RGB = (95, 60, 160)  # hematoxylin-like blue-purple, blue-dominant


@dataclass(frozen=True)
class SynthConfig:
    n_slides: int = 20
    seed: int = 0
    dim: int = 16
    signal_strength: float = 3.0
    min_patches: int = 24
    max_patches: int = 48
    masked_patches: int = 2

    def __post_init__(self) -> None:
        if self.n_slides < 2:
            raise ValidationError("need at least two slides (one per class)")
        if self.dim < 1:
            raise ValidationError("embedding width must be >= 1")
        if not 1 <= self.min_patches <= self.max_patches:
            raise ValidationError("patch count range must satisfy 1 <= min <= max")
        if self.signal_strength < 0:
            raise ValidationError("signal_strength must be non-negative")
        if self.masked_patches < 0:
            raise ValidationError("masked_patches must be non-negative")


def _grid_refs(n_patches: int) -> list[PatchRef]:
    cols = math.ceil(math.sqrt(n_patches))
    return [
        PatchRef(x=(i % cols) * PATCH_SIZE, y=(i // cols) * PATCH_SIZE, size=PATCH_SIZE)
        for i in range(n_patches)
    ]


def _make_bag(
    slide_id: str, label: SubtypeLabel, rng: np.random.Generator, cfg: SynthConfig,
    signal_dir: np.ndarray,
) -> SlideBag:
    n = int(rng.integers(cfg.min_patches, cfg.max_patches + 1))
    emb = rng.standard_normal((n, cfg.dim))
    if label == SubtypeLabel.GCB and cfg.signal_strength > 0:
        frac = rng.uniform(0.25, 0.5)
        n_carriers = max(1, round(frac * n))
        carriers = rng.choice(n, size=n_carriers, replace=False)
        emb[carriers] += cfg.signal_strength * signal_dir
    return SlideBag(
        slide_id=slide_id,
        patches=_grid_refs(n),
        embeddings=emb.astype(np.float32),
        label=label,
    )


def _rasterize_ellipse(
    labels: np.ndarray, cy: float, cx: float, a: float, b: float, theta: float, value: int
) -> None:
    reach = int(math.ceil(max(a, b))) + 1
    y0 = max(0, int(cy) - reach)
    y1 = min(labels.shape[0], int(cy) + reach + 1)
    x0 = max(0, int(cx) - reach)
    x1 = min(labels.shape[1], int(cx) + reach + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dy = ys - cy
    dx = xs - cx
    ct, st = math.cos(theta), math.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    inside = u * u + v * v <= 1.0
    labels[y0:y1, x0:x1][inside] = value


def _make_mask(label: SubtypeLabel, rng: np.random.Generator) -> LabelMask:
    """Non-touching elliptical nuclei on a jittered grid, 12 to 30 per patch."""
    labels = np.zeros((PATCH_SIZE, PATCH_SIZE), dtype=np.uint16)
    cell = 32
    cells_per_side = PATCH_SIZE // cell
    n_nuclei = int(rng.integers(12, 31))
    chosen = rng.choice(cells_per_side * cells_per_side, size=n_nuclei, replace=False)
    # ABC nuclei run slightly larger so group comparisons have a signal.
    lo, hi = (5.5, 9.5) if label == SubtypeLabel.ABC else (4.0, 7.5)
    for nucleus_id, cell_index in enumerate(np.sort(chosen), start=1):
        cy = (cell_index // cells_per_side) * cell + cell / 2 + rng.uniform(-3, 3)
        cx = (cell_index % cells_per_side) * cell + cell / 2 + rng.uniform(-3, 3)
        a = rng.uniform(lo, hi)
        b = rng.uniform(0.6 * a, a)
        theta = rng.uniform(0, math.pi)
        _rasterize_ellipse(labels, cy, cx, a, b, theta, nucleus_id)
    return LabelMask(labels=labels)


def _mask_to_rgb(mask: LabelMask, rng: np.random.Generator) -> np.ndarray:
    img = np.empty((mask.height, mask.width, 3), dtype=np.float64)
    img[...] = BACKGROUND_RGB
    img[mask.labels > 0] = NUCLEUS_RGB
    img += rng.integers(-6, 7, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _make_thumbnail(n_patches: int, rng: np.random.Generator) -> np.ndarray:
    cols = math.ceil(math.sqrt(n_patches))
    rows = math.ceil(n_patches / cols)
    side = PATCH_SIZE // THUMB_DOWNSCALE
    thumb = np.empty((rows * side, cols * side, 3), dtype=np.float64)
    thumb[...] = BACKGROUND_RGB
    for i in range(rows * cols):
        ty = (i // cols) * side
        tx = (i % cols) * side
        thumb[ty : ty + side, tx : tx + side] += rng.integers(-14, 15, size=3)
    return np.clip(thumb, 0, 255).astype(np.uint8)


def generate_corpus(out_dir: str | Path, cfg: SynthConfig) -> Path:
    """Write the corpus under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    (out / "thumbs").mkdir(exist_ok=True)

    signal_dir = np.random.default_rng([cfg.seed, 0]).standard_normal(cfg.dim)
    signal_dir /= np.linalg.norm(signal_dir)

    rows = []
    for i in range(cfg.n_slides):
        slide_id = f"S{i:04d}"
        label = SubtypeLabel.ABC if i % 2 == 0 else SubtypeLabel.GCB
        rng = np.random.default_rng([cfg.seed, 1000 + i])
        bag = _make_bag(slide_id, label, rng, cfg, signal_dir)
        bag_path = out / "bags" / f"{slide_id}.bag"
        write_embedding_file(bag, bag_path)

        mask_dir = None
        if cfg.masked_patches > 0:
            mask_dir = out / "masks" / slide_id
            mask_dir.mkdir(parents=True, exist_ok=True)
            patch_img_dir = out / "patches" / slide_id
            patch_img_dir.mkdir(parents=True, exist_ok=True)
            for ref in bag.patches[: cfg.masked_patches]:
                mask = _make_mask(label, rng)
                write_label_mask(mask, mask_dir / mask_filename(slide_id, ref.x, ref.y))
                rgb = _mask_to_rgb(mask, rng)
                netpbm.write_ppm(patch_img_dir / f"{slide_id}_{ref.x}_{ref.y}.ppm", rgb)

        thumb_path = out / "thumbs" / f"{slide_id}.ppm"
        netpbm.write_ppm(thumb_path, _make_thumbnail(bag.n_patches, rng))
        rows.append(
            ManifestRow(
                slide_id=slide_id,
                label=label,
                embedding_path=bag_path,
                mask_dir=mask_dir,
                thumbnail_path=thumb_path,
            )
        )

    manifest_path = out / "manifest.csv"
    write_manifest(Manifest(rows=rows), manifest_path)
    return manifest_path
