"""Command-line interface: tile, train, eval, heatmap, morpho, synth.

Flag values win over the JSON config file, which wins over defaults.
Every command writes a run manifest (effective config plus SHA-256
digests of its file inputs) into the output directory, and writes
nothing outside it.

Exit codes: 0 success, 1 I/O or file-format failure, 2 validation
failure, 3 numeric failure.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import __version__, metrics as metrics_mod, morpho as morpho_mod, netpbm
from . import synth as synth_mod, tiler as tiler_mod, trainer as trainer_mod, viz as viz_mod
from .datamodel import (
    LabelMask,
    PatchRef,
    SubtypeLabel,
    load_bags,
    read_embedding_file,
    read_label_mask,
    read_manifest,
)
from .errors import (
    FileFormatError,
    NumericError,
    ValidationError,
)
from .milnet import MilConfig, forward, load_checkpoint
from .trainer import TrainConfig

logger = logging.getLogger("lymphomil")

CONTEXT_SETTINGS = {
    "auto_envvar_prefix": "LYMPHOMIL",
    "help_option_names": ["-h", "--help"],
    "show_default": True,
}


def guarded(fn):
    """Map domain exceptions onto the exit-code contract."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (FileFormatError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except ValidationError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except NumericError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)

    return wrapper


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _apply_config_file(ctx: click.Context, config_path: Optional[str], values: dict) -> dict:
    """Overlay config-file entries onto parameters left at their defaults."""
    effective = dict(values)
    if config_path is None:
        return effective
    with open(config_path, encoding="utf-8") as f:
        file_cfg = json.load(f)
    if not isinstance(file_cfg, dict):
        raise ValidationError("config file must hold a JSON object")
    unknown = set(file_cfg) - set(values)
    if unknown:
        raise ValidationError(f"config file has unknown keys: {sorted(unknown)}")
    from click.core import ParameterSource

    for key, file_value in file_cfg.items():
        source = ctx.get_parameter_source(key)
        if source in (ParameterSource.DEFAULT, ParameterSource.DEFAULT_MAP, None):
            effective[key] = file_value
    return effective


def _write_run_manifest(out_dir: Path, command: str, effective: dict, inputs: list[Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in effective.items()},
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None and Path(p).is_file()},
    }
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


@click.group(context_settings=CONTEXT_SETTINGS)
@click.version_option(version=__version__, prog_name="lymphomil")
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Weakly supervised slide classification and nuclear morphometry."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("tile")
@click.option("--input", "input_path", required=True, type=click.Path(), help="Slide image (PPM).")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--slide-id", default=None, help="Slide id; defaults to the input stem.")
@click.option("--masks", "masks_dir", default=None, type=click.Path(), help="Directory of per-patch label masks.")
@click.option("--config", "config_path", default=None, type=click.Path(), help="JSON config file.")
@click.option("--patch-size", default=256, type=int)
@click.option("--white-mean-threshold", default=220.0, type=float)
@click.option("--white-fraction-threshold", default=0.9, type=float)
@click.option("--tissue-saturation-threshold", default=0.05, type=float)
@click.option("--min-nuclei", default=10, type=int, help="Reject patches with this many nuclei or fewer.")
@click.option("--write-patches/--no-write-patches", default=True, help="Write kept patches as PPM files.")
@click.pass_context
@guarded
def cmd_tile(
    ctx: click.Context,
    input_path: str,
    out_dir: str,
    slide_id: Optional[str],
    masks_dir: Optional[str],
    config_path: Optional[str],
    patch_size: int,
    white_mean_threshold: float,
    white_fraction_threshold: float,
    tissue_saturation_threshold: float,
    min_nuclei: int,
    write_patches: bool,
) -> None:
    """Cut one slide image into filtered patches."""
    effective = _apply_config_file(
        ctx,
        config_path,
        {
            "patch_size": patch_size,
            "white_mean_threshold": white_mean_threshold,
            "white_fraction_threshold": white_fraction_threshold,
            "tissue_saturation_threshold": tissue_saturation_threshold,
            "min_nuclei": min_nuclei,
        },
    )
    cfg = tiler_mod.TilingConfig(
        patch_size=int(effective["patch_size"]),
        white_mean_threshold=float(effective["white_mean_threshold"]),
        white_fraction_threshold=float(effective["white_fraction_threshold"]),
        tissue_saturation_threshold=float(effective["tissue_saturation_threshold"]),
        min_nuclei_exclusive=int(effective["min_nuclei"]),
    )
    sid = slide_id or Path(input_path).stem
    image = netpbm.read_ppm(input_path)

    lookup = None
    if masks_dir is not None:
        masks_root = Path(masks_dir)

        def lookup(x: int, y: int) -> Optional[LabelMask]:
            p = masks_root / f"{sid}_{x}_{y}.pgm"
            return read_label_mask(p) if p.is_file() else None

    outcomes, report = tiler_mod.tile_image(image, cfg, lookup)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tiler_mod.write_patch_csv(out / "patches.csv", sid, outcomes)
    if write_patches:
        patch_dir = out / "patches"
        patch_dir.mkdir(exist_ok=True)
        for o in outcomes:
            if o.kept:
                ref = o.ref
                tile = image[ref.y : ref.y + ref.size, ref.x : ref.x + ref.size]
                netpbm.write_ppm(patch_dir / f"{sid}_{ref.x}_{ref.y}.ppm", tile)
    _write_run_manifest(out, "tile", {**effective, "input": input_path, "slide_id": sid}, [Path(input_path)])
    click.echo(
        f"{sid}: grid {report.total_grid}, kept {report.kept}, "
        f"white {report.rejected_white}, low cellularity {report.rejected_low_cellularity}, "
        f"background {report.rejected_background}"
    )


_TRAIN_DEFAULTS = TrainConfig()


@main.command("train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(), help="JSON config file.")
@click.option("--learning-rate", default=_TRAIN_DEFAULTS.learning_rate, type=float)
@click.option("--weight-decay", default=_TRAIN_DEFAULTS.weight_decay, type=float)
@click.option("--beta1", default=_TRAIN_DEFAULTS.beta1, type=float)
@click.option("--beta2", default=_TRAIN_DEFAULTS.beta2, type=float)
@click.option("--epsilon", default=_TRAIN_DEFAULTS.epsilon, type=float)
@click.option("--dropout", default=_TRAIN_DEFAULTS.dropout, type=float)
@click.option("--max-epochs", default=_TRAIN_DEFAULTS.max_epochs, type=int)
@click.option("--patience", default=_TRAIN_DEFAULTS.patience, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--folds", default=3, type=int)
@click.option("--hidden-dim", default=512, type=int)
@click.option("--attn-dim", default=256, type=int)
@click.option("--activation", default="relu", type=click.Choice(["relu", "identity"]))
@click.option("--classifier-mode", default="per_class", type=click.Choice(["per_class", "shared"]))
@click.pass_context
@guarded
def cmd_train(ctx: click.Context, manifest_path: str, out_dir: str, config_path: Optional[str], **kwargs) -> None:
    """Cross-validated training from a manifest of labeled bags."""
    effective = _apply_config_file(ctx, config_path, kwargs)
    cfg = TrainConfig(
        learning_rate=float(effective["learning_rate"]),
        weight_decay=float(effective["weight_decay"]),
        beta1=float(effective["beta1"]),
        beta2=float(effective["beta2"]),
        epsilon=float(effective["epsilon"]),
        dropout=float(effective["dropout"]),
        max_epochs=int(effective["max_epochs"]),
        patience=int(effective["patience"]),
        seed=int(effective["seed"]),
    )
    mil_cfg = MilConfig(
        dim_hidden=int(effective["hidden_dim"]),
        dim_attn=int(effective["attn_dim"]),
        compress_activation=str(effective["activation"]),
        classifier_mode=str(effective["classifier_mode"]),
        dropout=cfg.dropout,
    )
    manifest = read_manifest(manifest_path, check_files=True)
    bags = load_bags(manifest)
    out = Path(out_dir)
    report = trainer_mod.run_cross_validation(
        manifest, bags, cfg, mil_cfg, n_folds=int(effective["folds"]), out_dir=out
    )
    with open(out / "cv_report.json", "w", encoding="utf-8") as f:
        f.write(report.to_json())
    _write_run_manifest(out, "train", {**effective, "manifest": manifest_path}, [Path(manifest_path)])
    auc = report.summary["auc"]
    click.echo(f"cross-validation done: auc mean {auc['mean']} std {auc['std']} max {auc['max']}")


@main.command("eval")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--threshold", default=0.5, type=float, help="Positive-decision threshold on the ABC score.")
@click.option("--jobs", default=1, type=int, help="Worker pool width for per-slide scoring.")
@click.pass_context
@guarded
def cmd_eval(
    ctx: click.Context,
    manifest_path: str,
    checkpoint_path: str,
    out_dir: str,
    threshold: float,
    jobs: int,
) -> None:
    """Score labeled bags with a trained checkpoint."""
    manifest = read_manifest(manifest_path, check_files=True)
    bags = load_bags(manifest)
    params, mil_cfg = load_checkpoint(checkpoint_path)
    ordered = [bags[row.slide_id] for row in manifest]

    def score(bag):
        return float(forward(bag, params, mil_cfg).probs[SubtypeLabel.ABC.value])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(score, ordered))
    else:
        scores = [score(bag) for bag in ordered]
    ys = [1 if bag.label == SubtypeLabel.ABC else 0 for bag in ordered]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scores.csv", "w", newline="", encoding="utf-8") as f:
        f.write("slide_id,label,score_abc,predicted\n")
        for bag, s in zip(ordered, scores):
            pred = SubtypeLabel.ABC if s >= threshold else SubtypeLabel.GCB
            f.write(f"{bag.slide_id},{bag.label.name},{s!r},{pred.name}\n")
    result = metrics_mod.evaluate(scores, ys, threshold)
    metrics_mod.write_metric_csv(out / "metrics.csv", [(0, result)])
    _write_run_manifest(
        out,
        "eval",
        {"manifest": manifest_path, "checkpoint": checkpoint_path, "threshold": threshold, "jobs": jobs},
        [Path(manifest_path), Path(checkpoint_path)],
    )
    click.echo(f"auc {result.auc} acc {result.acc} over {len(ordered)} slides")


@main.command("heatmap")
@click.option("--bag", "bag_path", required=True, type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--thumbnail", "thumbnail_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--downscale", default=32, type=int, help="Level-0 pixels per thumbnail pixel.")
@click.option("--branch", default="predicted", type=click.Choice(["predicted", "abc", "gcb"]))
@click.option("--top-k", default=10, type=int)
@click.pass_context
@guarded
def cmd_heatmap(
    ctx: click.Context,
    bag_path: str,
    checkpoint_path: str,
    thumbnail_path: str,
    out_dir: str,
    downscale: int,
    branch: str,
    top_k: int,
) -> None:
    """Render the attention overlay for one bag."""
    bag = read_embedding_file(bag_path)
    params, mil_cfg = load_checkpoint(checkpoint_path)
    thumbnail = netpbm.read_ppm(thumbnail_path)
    trace = forward(bag, params, mil_cfg)
    if branch == "predicted":
        branch_index = int(np.argmax(trace.probs))
    else:
        branch_index = SubtypeLabel[branch.upper()].value
    amap = viz_mod.build_attention_map(bag.slide_id, bag.patches, trace.A, branch_index)
    rendered = viz_mod.render_heatmap(amap, thumbnail, downscale)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    class_name = SubtypeLabel(branch_index).name.lower()
    netpbm.write_ppm(out / f"{bag.slide_id}_heatmap_{class_name}.ppm", rendered)
    viz_mod.write_top_k_csv(out / f"{bag.slide_id}_top_{top_k}.csv", amap, top_k)
    _write_run_manifest(
        out,
        "heatmap",
        {
            "bag": bag_path, "checkpoint": checkpoint_path, "thumbnail": thumbnail_path,
            "downscale": downscale, "branch": branch, "top_k": top_k,
        },
        [Path(bag_path), Path(checkpoint_path), Path(thumbnail_path)],
    )
    click.echo(f"{bag.slide_id}: heatmap for class {class_name} over {bag.n_patches} patches")


def _read_labels_csv(path: Path) -> dict[str, SubtypeLabel]:
    import csv as _csv

    labels = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = _csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["slide_id", "label"]:
            raise FileFormatError(f"{path.name}: labels CSV must start with slide_id,label")
        for rec in reader:
            if not rec or not rec[0].strip():
                continue
            labels[rec[0].strip()] = SubtypeLabel.parse(rec[1])
    return labels


@main.command("morpho")
@click.option("--patches", "patches_dir", required=True, type=click.Path(), help="Directory of RGB patch PPMs.")
@click.option("--masks", "masks_dir", required=True, type=click.Path(), help="Directory of label mask PGMs.")
@click.option("--labels", "labels_path", required=True, type=click.Path(), help="CSV of slide_id,label.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--jobs", default=1, type=int, help="Worker pool width for per-patch extraction.")
@click.pass_context
@guarded
def cmd_morpho(
    ctx: click.Context, patches_dir: str, masks_dir: str, labels_path: str, out_dir: str, jobs: int
) -> None:
    """Extract nucleus features and compare the two groups."""
    labels = _read_labels_csv(Path(labels_path))
    mask_files = sorted(Path(masks_dir).rglob("*.pgm"))
    if not mask_files:
        raise ValidationError(f"no .pgm masks under {masks_dir}")
    patch_root = Path(patches_dir)

    def parse_name(stem: str) -> tuple[str, int, int]:
        parts = stem.rsplit("_", 2)
        if len(parts) != 3:
            raise ValidationError(f"mask name {stem!r} is not <slide_id>_<x>_<y>")
        return parts[0], int(parts[1]), int(parts[2])

    def extract(mask_path: Path):
        slide_id, x, y = parse_name(mask_path.stem)
        if slide_id not in labels:
            raise ValidationError(f"slide {slide_id!r} missing from the labels CSV")
        candidates = [p for p in patch_root.rglob(mask_path.stem + ".ppm")]
        if not candidates:
            raise ValidationError(f"no patch image for mask {mask_path.name}")
        mask = read_label_mask(mask_path)
        rgb = netpbm.read_ppm(candidates[0])
        ref = PatchRef(x=x, y=y, size=mask.width)
        records = morpho_mod.nucleus_features(mask, rgb, slide_id=slide_id, patch_ref=ref)
        return labels[slide_id], records, morpho_mod.patch_aggregate(mask, records)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            extracted = list(pool.map(extract, mask_files))
    else:
        extracted = [extract(p) for p in mask_files]

    abc_records, gcb_records = [], []
    abc_patches, gcb_patches = [], []
    all_records = []
    for label, records, agg in extracted:
        all_records.extend(records)
        if label == SubtypeLabel.ABC:
            abc_records.extend(records)
            abc_patches.append(agg)
        else:
            gcb_records.extend(records)
            gcb_patches.append(agg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    morpho_mod.write_nucleus_csv(out / "nuclei.csv", all_records)
    stats = morpho_mod.compare_groups(abc_records, gcb_records, abc_patches, gcb_patches)
    with open(out / "group_stats.json", "w", encoding="utf-8") as f:
        f.write(stats.to_json())
    _write_run_manifest(
        out,
        "morpho",
        {"patches": patches_dir, "masks": masks_dir, "labels": labels_path, "jobs": jobs},
        [Path(labels_path)],
    )
    click.echo(
        f"{len(all_records)} nuclei from {len(mask_files)} patches "
        f"({len(abc_records)} abc / {len(gcb_records)} gcb)"
    )


@main.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--slides", default=20, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--dim", default=16, type=int)
@click.option("--signal", default=3.0, type=float, help="Planted class-signal strength; 0 for an unlearnable corpus.")
@click.option("--min-patches", default=24, type=int)
@click.option("--max-patches", default=48, type=int)
@click.option("--masked-patches", default=2, type=int, help="Patches per slide that get masks and images.")
@click.pass_context
@guarded
def cmd_synth(
    ctx: click.Context,
    out_dir: str,
    slides: int,
    seed: int,
    dim: int,
    signal: float,
    min_patches: int,
    max_patches: int,
    masked_patches: int,
) -> None:
    """Generate a deterministic synthetic corpus."""
    cfg = synth_mod.SynthConfig(
        n_slides=slides,
        seed=seed,
        dim=dim,
        signal_strength=signal,
        min_patches=min_patches,
        max_patches=max_patches,
        masked_patches=masked_patches,
    )
    manifest_path = synth_mod.generate_corpus(out_dir, cfg)
    _write_run_manifest(
        Path(out_dir),
        "synth",
        {
            "slides": slides, "seed": seed, "dim": dim, "signal": signal,
            "min_patches": min_patches, "max_patches": max_patches,
            "masked_patches": masked_patches,
        },
        [],
    )
    click.echo(f"wrote {slides} slides to {manifest_path}")


if __name__ == "__main__":
    main()
