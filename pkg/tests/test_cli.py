import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from lymphomil import netpbm
from lymphomil.cli import main
from lymphomil.datamodel import read_manifest, SubtypeLabel


def run_cli(args, env=None):
    return CliRunner().invoke(main, args, env=env, catch_exceptions=False)


def tree_digest(root):
    """(relative path, sha256) for every file under root, sorted."""
    out = []
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            out.append((str(p.relative_to(root)), hashlib.sha256(p.read_bytes()).hexdigest()))
    return out


def tissue_image(h=32, w=32):
    """Pink tissue with one nucleus-colored pixel per 8x8 grid cell."""
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[:] = (200, 120, 170)
    for y in range(0, h, 8):
        for x in range(0, w, 8):
            img[y + 4, x + 4] = (60, 40, 150)
    return img


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    result = run_cli(
        ["synth", "--out", str(out), "--slides", "8", "--seed", "2", "--dim", "4",
         "--min-patches", "4", "--max-patches", "6", "--masked-patches", "1"]
    )
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="session")
def train_out(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("train")
    result = run_cli(
        ["train", "--manifest", str(corpus_dir / "manifest.csv"), "--out", str(out),
         "--hidden-dim", "8", "--attn-dim", "4", "--max-epochs", "2", "--patience", "2",
         "--seed", "0"]
    )
    assert result.exit_code == 0, result.output
    return out


class TestTopLevel:
    def test_help_lists_commands(self):
        result = run_cli(["--help"])
        assert result.exit_code == 0
        for cmd in ("tile", "train", "eval", "heatmap", "morpho", "synth"):
            assert cmd in result.output

    def test_version(self):
        result = run_cli(["--version"])
        assert result.exit_code == 0
        assert "lymphomil" in result.output

    def test_subcommand_help(self):
        result = run_cli(["train", "-h"])
        assert result.exit_code == 0
        assert "--learning-rate" in result.output


class TestSynth:
    def test_corpus_is_complete_and_readable(self, corpus_dir):
        manifest = read_manifest(corpus_dir / "manifest.csv", check_files=True)
        assert len(manifest) == 8
        counts = manifest.class_counts()
        assert counts[SubtypeLabel.ABC] == 4 and counts[SubtypeLabel.GCB] == 4
        for row in manifest:
            assert row.embedding_path.is_file()
            assert row.thumbnail_path.is_file()
            masks = sorted(row.mask_dir.glob("*.pgm"))
            assert len(masks) == 1
        assert (corpus_dir / "run_manifest.json").is_file()

    def test_mask_and_patch_images_pair_up(self, corpus_dir):
        mask = sorted((corpus_dir / "masks" / "S0000").glob("*.pgm"))[0]
        patch = corpus_dir / "patches" / "S0000" / (mask.stem + ".ppm")
        assert patch.is_file()
        labels = netpbm.read_pgm(mask)
        rgb = netpbm.read_ppm(patch)
        assert labels.shape == rgb.shape[:2] == (256, 256)
        assert labels.max() >= 12  # at least a dozen nuclei per masked patch

    def test_byte_determinism(self, tmp_path):
        args = ["synth", "--slides", "4", "--seed", "9", "--dim", "3",
                "--min-patches", "2", "--max-patches", "3", "--masked-patches", "1"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli(args + ["--out", str(a)]).exit_code == 0
        assert run_cli(args + ["--out", str(b)]).exit_code == 0
        assert tree_digest(a) == tree_digest(b)

    def test_invalid_patch_range_exits_2(self, tmp_path):
        result = run_cli(["synth", "--out", str(tmp_path / "x"), "--min-patches", "5", "--max-patches", "2"])
        assert result.exit_code == 2

    def test_env_var_supplies_option(self, tmp_path):
        out = tmp_path / "envcorpus"
        result = run_cli(
            ["synth", "--out", str(out), "--min-patches", "2", "--max-patches", "2"],
            env={"LYMPHOMIL_SYNTH_SLIDES": "4"},
        )
        assert result.exit_code == 0
        assert len(read_manifest(out / "manifest.csv")) == 4


class TestTile:
    def write_slide(self, tmp_path, img, name="slide.ppm"):
        path = tmp_path / name
        netpbm.write_ppm(path, img)
        return path

    def test_full_grid_kept(self, tmp_path):
        slide = self.write_slide(tmp_path, tissue_image())
        out = tmp_path / "out"
        result = run_cli(["tile", "--input", str(slide), "--out", str(out),
                          "--patch-size", "8", "--min-nuclei", "0"])
        assert result.exit_code == 0
        assert "grid 16, kept 16" in result.output
        lines = (out / "patches.csv").read_text().splitlines()
        assert lines[0] == "slide_id,x,y,kept,reason"
        assert len(lines) == 17
        assert lines[1] == "slide,0,0,1,kept"
        assert len(list((out / "patches").glob("*.ppm"))) == 16
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "tile"
        assert manifest["config"]["patch_size"] == 8
        assert str(slide) in manifest["inputs"]

    def test_written_patches_round_trip(self, tmp_path):
        img = tissue_image(16, 16)
        slide = self.write_slide(tmp_path, img)
        out = tmp_path / "out"
        run_cli(["tile", "--input", str(slide), "--out", str(out),
                 "--patch-size", "8", "--min-nuclei", "0"])
        tile = netpbm.read_ppm(out / "patches" / "slide_8_8.ppm")
        np.testing.assert_array_equal(tile, img[8:16, 8:16])

    def test_pale_cell_rejected_as_white(self, tmp_path):
        img = tissue_image(16, 16)
        img[0:8, 8:16] = (255, 255, 230)  # saturated enough, but bright
        slide = self.write_slide(tmp_path, img)
        out = tmp_path / "out"
        result = run_cli(["tile", "--input", str(slide), "--out", str(out),
                          "--patch-size", "8", "--min-nuclei", "0"])
        assert result.exit_code == 0
        reasons = dict()
        for line in (out / "patches.csv").read_text().splitlines()[1:]:
            sid, x, y, kept, reason = line.split(",")
            reasons[(x, y)] = reason
        assert reasons[("8", "0")] == "white"
        assert reasons[("0", "0")] == "kept"

    def test_mask_directory_drives_cellularity(self, tmp_path):
        img = tissue_image(16, 16)
        slide = self.write_slide(tmp_path, img, name="s1.ppm")
        masks = tmp_path / "masks"
        masks.mkdir()
        netpbm.write_pgm(masks / "s1_0_0.pgm", np.zeros((8, 8), dtype=np.uint8))
        out = tmp_path / "out"
        result = run_cli(["tile", "--input", str(slide), "--out", str(out),
                          "--masks", str(masks), "--patch-size", "8", "--min-nuclei", "0"])
        assert result.exit_code == 0
        lines = (out / "patches.csv").read_text().splitlines()
        assert "s1,0,0,0,low_cellularity" in lines
        assert "s1,8,0,1,kept" in lines

    def test_missing_input_exits_1(self, tmp_path):
        result = run_cli(["tile", "--input", str(tmp_path / "absent.ppm"), "--out", str(tmp_path / "o")])
        assert result.exit_code == 1

    def test_config_file_fills_defaults(self, tmp_path):
        slide = self.write_slide(tmp_path, tissue_image(16, 16))
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"patch_size": 8, "min_nuclei": 0}))
        out = tmp_path / "out"
        result = run_cli(["tile", "--input", str(slide), "--out", str(out), "--config", str(cfg)])
        assert result.exit_code == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["config"]["patch_size"] == 8
        assert manifest["config"]["min_nuclei"] == 0

    def test_flag_beats_config_file(self, tmp_path):
        slide = self.write_slide(tmp_path, tissue_image(16, 16))
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"patch_size": 4}))
        out = tmp_path / "out"
        result = run_cli(["tile", "--input", str(slide), "--out", str(out),
                          "--config", str(cfg), "--patch-size", "8", "--min-nuclei", "0"])
        assert result.exit_code == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["config"]["patch_size"] == 8

    def test_unknown_config_key_exits_2(self, tmp_path):
        slide = self.write_slide(tmp_path, tissue_image(16, 16))
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"patchsize": 8}))
        result = run_cli(["tile", "--input", str(slide), "--out", str(tmp_path / "o"), "--config", str(cfg)])
        assert result.exit_code == 2


class TestTrain:
    def test_artifacts(self, train_out):
        report = json.loads((train_out / "cv_report.json").read_text())
        assert report["n_folds"] == 3
        assert len(report["folds"]) == 3
        for entry in report["folds"]:
            assert {"fold", "best_epoch", "stopped_epoch", "auc", "acc",
                    "ppv", "npv", "tp", "fp", "tn", "fn"} <= set(entry)
            assert entry["best_epoch"] <= entry["stopped_epoch"] <= 2
        assert set(report["summary"]) == {"auc", "acc", "ppv", "npv"}
        for i in range(3):
            assert (train_out / f"fold_{i}.milp").is_file()
            assert (train_out / f"fold_{i}.milp.json").is_file()
            log = (train_out / f"train_log_fold_{i}.csv").read_text().splitlines()
            assert log[0] == "epoch,train_loss,val_loss,val_auc"
            assert len(log) >= 2
        assert (train_out / "run_manifest.json").is_file()

    def test_report_and_checkpoints_reproducible(self, corpus_dir, train_out, tmp_path):
        out2 = tmp_path / "again"
        result = run_cli(
            ["train", "--manifest", str(corpus_dir / "manifest.csv"), "--out", str(out2),
             "--hidden-dim", "8", "--attn-dim", "4", "--max-epochs", "2", "--patience", "2",
             "--seed", "0"]
        )
        assert result.exit_code == 0
        assert (out2 / "cv_report.json").read_bytes() == (train_out / "cv_report.json").read_bytes()
        for i in range(3):
            assert (out2 / f"fold_{i}.milp").read_bytes() == (train_out / f"fold_{i}.milp").read_bytes()

    def test_single_class_manifest_exits_2(self, corpus_dir, tmp_path):
        rows = ["slide_id,label,embedding_path,mask_dir,thumbnail_path"]
        for i in (0, 2, 4, 6):
            rows.append(f"S{i:04d},ABC,{corpus_dir}/bags/S{i:04d}.bag,,")
        bad = tmp_path / "oneclass.csv"
        bad.write_text("\n".join(rows) + "\n")
        result = run_cli(["train", "--manifest", str(bad), "--out", str(tmp_path / "o")])
        assert result.exit_code == 2

    def test_missing_manifest_exits_1(self, tmp_path):
        result = run_cli(["train", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
        assert result.exit_code == 1


class TestEval:
    def test_scores_and_metrics(self, corpus_dir, train_out, tmp_path):
        out = tmp_path / "eval"
        result = run_cli(["eval", "--manifest", str(corpus_dir / "manifest.csv"),
                          "--checkpoint", str(train_out / "fold_0.milp"), "--out", str(out)])
        assert result.exit_code == 0, result.output
        lines = (out / "scores.csv").read_text().splitlines()
        assert lines[0] == "slide_id,label,score_abc,predicted"
        assert len(lines) == 9
        for line in lines[1:]:
            sid, label, score, predicted = line.split(",")
            assert label in ("ABC", "GCB") and predicted in ("ABC", "GCB")
            assert 0.0 <= float(score) <= 1.0
        metrics_lines = (out / "metrics.csv").read_text().splitlines()
        assert metrics_lines[0].startswith("fold,auc,acc")
        assert metrics_lines[1].startswith("0,")

    def test_label_flip_mirrors_auc(self, corpus_dir, train_out, tmp_path):
        text = (corpus_dir / "manifest.csv").read_text().splitlines()
        swapped = [text[0]]
        for line in text[1:]:
            parts = line.split(",")
            parts[1] = {"ABC": "GCB", "GCB": "ABC"}[parts[1]]
            swapped.append(",".join(parts))
        # keep relative paths valid by writing next to the original
        flipped = corpus_dir / "flipped.csv"
        flipped.write_text("\n".join(swapped) + "\n")

        def auc_of(manifest_path, out):
            result = run_cli(["eval", "--manifest", str(manifest_path),
                              "--checkpoint", str(train_out / "fold_0.milp"), "--out", str(out)])
            assert result.exit_code == 0
            row = (out / "metrics.csv").read_text().splitlines()[1]
            return float(row.split(",")[1])

        auc = auc_of(corpus_dir / "manifest.csv", tmp_path / "e1")
        auc_flipped = auc_of(flipped, tmp_path / "e2")
        assert abs(auc + auc_flipped - 1.0) < 1e-12

    def test_multiworker_scores_match_serial(self, corpus_dir, train_out, tmp_path):
        def scores_with(jobs, out):
            result = run_cli(["eval", "--manifest", str(corpus_dir / "manifest.csv"),
                              "--checkpoint", str(train_out / "fold_0.milp"),
                              "--out", str(out), "--jobs", str(jobs)])
            assert result.exit_code == 0
            return (out / "scores.csv").read_bytes()

        assert scores_with(1, tmp_path / "s1") == scores_with(4, tmp_path / "s4")

    def test_missing_checkpoint_exits_1(self, corpus_dir, tmp_path):
        result = run_cli(["eval", "--manifest", str(corpus_dir / "manifest.csv"),
                          "--checkpoint", str(tmp_path / "nope.milp"), "--out", str(tmp_path / "o")])
        assert result.exit_code == 1


class TestHeatmap:
    def run_heatmap(self, corpus_dir, train_out, out, branch="abc", extra=()):
        return run_cli(["heatmap", "--bag", str(corpus_dir / "bags" / "S0000.bag"),
                        "--checkpoint", str(train_out / "fold_0.milp"),
                        "--thumbnail", str(corpus_dir / "thumbs" / "S0000.ppm"),
                        "--out", str(out), "--branch", branch, *extra])

    def test_artifacts(self, corpus_dir, train_out, tmp_path):
        out = tmp_path / "hm"
        result = self.run_heatmap(corpus_dir, train_out, out)
        assert result.exit_code == 0, result.output
        rendered = netpbm.read_ppm(out / "S0000_heatmap_abc.ppm")
        thumb = netpbm.read_ppm(corpus_dir / "thumbs" / "S0000.ppm")
        assert rendered.shape == thumb.shape
        assert rendered.tobytes() != thumb.tobytes()
        top_lines = (out / "S0000_top_10.csv").read_text().splitlines()
        assert top_lines[0] == "slide_id,rank,x,y,normalized_score"
        assert 2 <= len(top_lines) <= 11
        ranks = [int(line.split(",")[1]) for line in top_lines[1:]]
        assert ranks == list(range(1, len(ranks) + 1))

    def test_predicted_branch_picks_a_class(self, corpus_dir, train_out, tmp_path):
        out = tmp_path / "hm"
        result = self.run_heatmap(corpus_dir, train_out, out, branch="predicted")
        assert result.exit_code == 0
        written = list(out.glob("S0000_heatmap_*.ppm"))
        assert len(written) == 1
        assert written[0].name in ("S0000_heatmap_abc.ppm", "S0000_heatmap_gcb.ppm")

    def test_renders_are_deterministic(self, corpus_dir, train_out, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert self.run_heatmap(corpus_dir, train_out, a).exit_code == 0
        assert self.run_heatmap(corpus_dir, train_out, b).exit_code == 0
        assert (a / "S0000_heatmap_abc.ppm").read_bytes() == (b / "S0000_heatmap_abc.ppm").read_bytes()

    def test_top_k_flag(self, corpus_dir, train_out, tmp_path):
        out = tmp_path / "hm"
        result = self.run_heatmap(corpus_dir, train_out, out, extra=("--top-k", "2"))
        assert result.exit_code == 0
        assert len((out / "S0000_top_2.csv").read_text().splitlines()) == 3


class TestMorpho:
    @pytest.fixture()
    def labels_csv(self, corpus_dir, tmp_path):
        manifest = read_manifest(corpus_dir / "manifest.csv")
        path = tmp_path / "labels.csv"
        lines = ["slide_id,label"] + [f"{r.slide_id},{r.label.name}" for r in manifest]
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_end_to_end(self, corpus_dir, labels_csv, tmp_path):
        out = tmp_path / "morpho"
        result = run_cli(["morpho", "--patches", str(corpus_dir / "patches"),
                          "--masks", str(corpus_dir / "masks"),
                          "--labels", str(labels_csv), "--out", str(out)])
        assert result.exit_code == 0, result.output
        nuclei = (out / "nuclei.csv").read_text().splitlines()
        assert nuclei[0].startswith("slide_id,x,y,nucleus_id,area")
        assert len(nuclei) > 8 * 12  # 8 masked patches, 12+ nuclei each
        stats = json.loads((out / "group_stats.json").read_text())
        for feature in ("area", "perimeter", "circularity", "aspect_ratio",
                        "solidity", "rb_ratio", "nucleus_count", "nc_ratio"):
            assert feature in stats
        area = stats["area"]
        assert area["abc"]["n"] > 40 and area["gcb"]["n"] > 40
        # the generator plants larger nuclei in the positive class
        assert area["abc"]["mean"] > area["gcb"]["mean"]
        assert area["p_value"] is not None

    def test_parallel_matches_serial(self, corpus_dir, labels_csv, tmp_path):
        outs = []
        for jobs, name in ((1, "m1"), (3, "m3")):
            out = tmp_path / name
            result = run_cli(["morpho", "--patches", str(corpus_dir / "patches"),
                              "--masks", str(corpus_dir / "masks"),
                              "--labels", str(labels_csv), "--out", str(out),
                              "--jobs", str(jobs)])
            assert result.exit_code == 0
            outs.append(out)
        assert (outs[0] / "nuclei.csv").read_bytes() == (outs[1] / "nuclei.csv").read_bytes()
        assert (outs[0] / "group_stats.json").read_bytes() == (outs[1] / "group_stats.json").read_bytes()

    def test_bad_labels_header_exits_1(self, corpus_dir, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("id,subtype\nS0000,ABC\n")
        result = run_cli(["morpho", "--patches", str(corpus_dir / "patches"),
                          "--masks", str(corpus_dir / "masks"),
                          "--labels", str(bad), "--out", str(tmp_path / "o")])
        assert result.exit_code == 1

    def test_unlabeled_slide_exits_2(self, corpus_dir, tmp_path):
        partial = tmp_path / "partial.csv"
        partial.write_text("slide_id,label\nS0000,ABC\n")
        result = run_cli(["morpho", "--patches", str(corpus_dir / "patches"),
                          "--masks", str(corpus_dir / "masks"),
                          "--labels", str(partial), "--out", str(tmp_path / "o")])
        assert result.exit_code == 2
