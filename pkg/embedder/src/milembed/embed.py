"""Embedding jobs: decode patches, run the backbone, write bag plus sidecar."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import bagfile
from .backbones import IMAGENET_MEAN, IMAGENET_STD, INPUT_SIZE, build_feature_extractor, preprocess
from .errors import ValidationError

logger = logging.getLogger("milembed")

COORDS_HEADER = ["filename", "x", "y"]


@dataclass(frozen=True)
class PatchSpec:
    path: Path
    x: int
    y: int


@dataclass
class EmbedJob:
    patches: list[PatchSpec]
    backbone: str
    out_path: Path
    device: str = "cpu"
    weights: str = "none"
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self) -> None:
        if not self.patches:
            raise ValidationError("job lists no patches")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EmbedResult:
    bag_path: Path
    sidecar_path: Path
    n_embedded: int
    width: int
    skipped: list[dict] = field(default_factory=list)


def read_coords_csv(path: str | Path) -> list[tuple[str, int, int]]:
    """Parse the patch listing: header ``filename,x,y``, coordinates >= 0."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != COORDS_HEADER:
            raise ValidationError(f"coords header {header} != {COORDS_HEADER}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValidationError(f"coords line {lineno}: expected 3 fields, got {len(row)}")
            name, xs, ys = row
            try:
                x, y = int(xs), int(ys)
            except ValueError:
                raise ValidationError(f"coords line {lineno}: non-integer coordinate") from None
            if x < 0 or y < 0:
                raise ValidationError(f"coords line {lineno}: negative coordinate")
            rows.append((name, x, y))
    if not rows:
        raise ValidationError(f"{path}: no patch rows")
    return rows


def _decode(spec: PatchSpec) -> np.ndarray | None:
    try:
        with Image.open(spec.path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        logger.warning("skipping %s: %s", spec.path.name, exc)
        return None


def embed_patches(job: EmbedJob) -> EmbedResult:
    """Embed every decodable patch and write the bag. Deterministic for a fixed
    backbone, weights mode, and seed; decode failures are skipped and logged."""
    images: list[np.ndarray] = []
    kept: list[PatchSpec] = []
    skipped: list[dict] = []
    for spec in job.patches:
        arr = _decode(spec)
        if arr is None:
            skipped.append({"filename": spec.path.name, "reason": "decode failure"})
            continue
        images.append(arr)
        kept.append(spec)
    if not images:
        raise ValidationError("no patch could be decoded")
    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise ValidationError(f"patches disagree on size: {sorted(shapes)}")

    model, spec_info = build_feature_extractor(job.backbone, job.weights, job.seed, job.device)
    rows = np.empty((len(images), spec_info.width), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, len(images), job.batch_size):
            chunk = images[start : start + job.batch_size]
            batch = torch.from_numpy(np.stack(chunk)).to(job.device)
            out = model(preprocess(batch))
            rows[start : start + len(chunk)] = out.cpu().numpy().astype(np.float32)

    bagfile.write_bag(job.out_path, rows, [(p.x, p.y) for p in kept])
    sidecar = Path(str(job.out_path) + ".json")
    meta = {
        "backbone": job.backbone,
        "weights": job.weights,
        "seed": job.seed,
        "device": job.device,
        "width": spec_info.width,
        "tapped_layer": spec_info.tapped,
        "normalization": {
            "input_size": INPUT_SIZE,
            "interpolation": "bilinear",
            "mean": list(IMAGENET_MEAN),
            "std": list(IMAGENET_STD),
        },
        "patch_shape": list(images[0].shape),
        "n_embedded": len(kept),
        "skipped": skipped,
    }
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return EmbedResult(
        bag_path=Path(job.out_path),
        sidecar_path=sidecar,
        n_embedded=len(kept),
        width=spec_info.width,
        skipped=skipped,
    )
