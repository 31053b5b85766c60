"""Command line interface: embed patches into a bag, verify bags."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .backbones import BACKBONES
from .bagfile import verify_roundtrip
from .embed import EmbedJob, PatchSpec, embed_patches, read_coords_csv
from .errors import SetupError, ValidationError


@click.group()
@click.version_option()
def main() -> None:
    """Patch embedding extraction for attention-MIL slide bags."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")


@main.command()
@click.option("--patches", required=True, type=click.Path(exists=True, file_okay=False), help="Directory holding patch images.")
@click.option("--coords", required=True, type=click.Path(exists=True, dir_okay=False), help="CSV listing filename,x,y per patch.")
@click.option("--backbone", required=True, type=click.Choice(sorted(BACKBONES)), help="Feature extractor.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output .bag path.")
@click.option("--weights", default="none", type=click.Choice(["none", "pretrained"]), show_default=True, help="Weight source; 'none' is seeded random init and runs offline.")
@click.option("--seed", default=0, show_default=True, help="Seed for --weights none initialization.")
@click.option("--device", default="cpu", show_default=True)
@click.option("--batch-size", default=32, show_default=True)
def embed(patches, coords, backbone, out, weights, seed, device, batch_size):
    """Embed the listed patches and write one .bag file plus a sidecar log."""
    try:
        listing = read_coords_csv(coords)
        base = Path(patches)
        job = EmbedJob(
            patches=[PatchSpec(base / name, x, y) for name, x, y in listing],
            backbone=backbone,
            out_path=Path(out),
            device=device,
            weights=weights,
            seed=seed,
            batch_size=batch_size,
        )
        result = embed_patches(job)
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except (SetupError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(
        f"embedded {result.n_embedded} patches at width {result.width} "
        f"({len(result.skipped)} skipped) -> {result.bag_path}"
    )


@main.command()
@click.option("--bag", required=True, type=click.Path(exists=True, dir_okay=False), help="Bag file to check.")
def verify(bag):
    """Re-read a bag with an independent parser and report mismatches."""
    report = verify_roundtrip(bag)
    click.echo(report.summary())
    if not report.ok:
        sys.exit(1)


if __name__ == "__main__":
    main()
