import json
import logging

import numpy as np
import pytest
from click.testing import CliRunner

from embhelpers import write_ppm
from milembed import backbones
from milembed.bagfile import verify_roundtrip
from milembed.cli import main
from milembed.embed import EmbedJob, PatchSpec, embed_patches, read_coords_csv
from milembed.errors import SetupError, ValidationError


def make_job(patch_dir, out, n=3, seed=5, backbone="resnet34", **kwargs):
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        p = patch_dir / f"p{i}.ppm"
        write_ppm(p, rng)
        specs.append(PatchSpec(p, 64 * i, 0))
    return EmbedJob(patches=specs, backbone=backbone, out_path=out, **kwargs)


def read_rows(bag_path):
    data = bag_path.read_bytes()
    import struct

    _, n, d = struct.unpack_from("<III", data, 4)
    return np.frombuffer(data, dtype="<f4", offset=16 + n * 8).reshape(n, d)


class TestEmbed:
    def test_writes_bag_and_sidecar(self, patch_dir, tmp_path):
        out = tmp_path / "s.bag"
        result = embed_patches(make_job(patch_dir, out))
        assert result.n_embedded == 3
        assert result.width == 512
        report = verify_roundtrip(out)
        assert report.ok and (report.n, report.d) == (3, 512)
        meta = json.loads(result.sidecar_path.read_text())
        assert meta["backbone"] == "resnet34"
        assert meta["width"] == 512
        assert meta["normalization"]["input_size"] == 224
        assert meta["normalization"]["mean"] == [0.485, 0.456, 0.406]
        assert meta["skipped"] == []
        assert "pool" in meta["tapped_layer"]

    def test_identical_patches_identical_rows(self, patch_dir, tmp_path):
        rng = np.random.default_rng(0)
        arr = write_ppm(patch_dir / "a.ppm", rng)
        (patch_dir / "b.ppm").write_bytes((patch_dir / "a.ppm").read_bytes())
        write_ppm(patch_dir / "c.ppm", rng)
        job = EmbedJob(
            patches=[
                PatchSpec(patch_dir / "a.ppm", 0, 0),
                PatchSpec(patch_dir / "b.ppm", 64, 0),
                PatchSpec(patch_dir / "c.ppm", 128, 0),
            ],
            backbone="resnet34",
            out_path=tmp_path / "s.bag",
        )
        embed_patches(job)
        rows = read_rows(tmp_path / "s.bag")
        assert (rows[0] == rows[1]).all()
        assert not (rows[0] == rows[2]).all()

    def test_same_seed_byte_identical(self, patch_dir, tmp_path):
        out1, out2 = tmp_path / "a.bag", tmp_path / "b.bag"
        embed_patches(make_job(patch_dir, out1, seed=5))
        embed_patches(make_job(patch_dir, out2, seed=5))
        assert out1.read_bytes() == out2.read_bytes()

    def test_seed_changes_rows(self, patch_dir, tmp_path):
        out1, out2 = tmp_path / "a.bag", tmp_path / "b.bag"
        embed_patches(make_job(patch_dir, out1))
        job = make_job(patch_dir, out2)
        job.seed = 1
        embed_patches(job)
        assert not (read_rows(out1) == read_rows(out2)).all()

    def test_batch_split_stable(self, patch_dir, tmp_path):
        out1, out2 = tmp_path / "a.bag", tmp_path / "b.bag"
        embed_patches(make_job(patch_dir, out1, n=5))
        embed_patches(make_job(patch_dir, out2, n=5, batch_size=2))
        # split position must not change results beyond float noise
        np.testing.assert_allclose(read_rows(out1), read_rows(out2), atol=1e-5)

    def test_native_width_768(self, patch_dir, tmp_path):
        out = tmp_path / "s.bag"
        result = embed_patches(make_job(patch_dir, out, n=2, backbone="convnext_tiny"))
        assert result.width == 768
        assert verify_roundtrip(out).d == 768

    def test_decode_failure_skipped_with_warning(self, patch_dir, tmp_path, caplog):
        job = make_job(patch_dir, tmp_path / "s.bag")
        bad = patch_dir / "bad.ppm"
        bad.write_bytes(b"this is not an image")
        job.patches.insert(1, PatchSpec(bad, 999, 999))
        with caplog.at_level(logging.WARNING, logger="milembed"):
            result = embed_patches(job)
        assert result.n_embedded == 3
        assert result.skipped == [{"filename": "bad.ppm", "reason": "decode failure"}]
        assert any("bad.ppm" in rec.message for rec in caplog.records)
        meta = json.loads(result.sidecar_path.read_text())
        assert meta["skipped"][0]["filename"] == "bad.ppm"
        report = verify_roundtrip(tmp_path / "s.bag")
        assert report.ok and report.n == 3

    def test_all_failures_rejected(self, patch_dir, tmp_path):
        bad = patch_dir / "bad.ppm"
        bad.write_bytes(b"junk")
        job = EmbedJob([PatchSpec(bad, 0, 0)], "resnet34", tmp_path / "s.bag")
        with pytest.raises(ValidationError, match="no patch"):
            embed_patches(job)

    def test_size_mismatch_rejected(self, patch_dir, tmp_path):
        rng = np.random.default_rng(2)
        write_ppm(patch_dir / "a.ppm", rng)
        write_ppm(patch_dir / "b.ppm", rng, size=(32, 32))
        job = EmbedJob(
            [PatchSpec(patch_dir / "a.ppm", 0, 0), PatchSpec(patch_dir / "b.ppm", 64, 0)],
            "resnet34",
            tmp_path / "s.bag",
        )
        with pytest.raises(ValidationError, match="size"):
            embed_patches(job)

    def test_job_validation(self, tmp_path):
        with pytest.raises(ValidationError, match="no patches"):
            EmbedJob([], "resnet34", tmp_path / "s.bag")
        with pytest.raises(ValidationError, match="batch_size"):
            EmbedJob([PatchSpec(tmp_path / "x.ppm", 0, 0)], "resnet34", tmp_path / "s.bag", batch_size=0)

    def test_unknown_backbone(self, patch_dir, tmp_path):
        job = make_job(patch_dir, tmp_path / "s.bag")
        job.backbone = "alexnet"
        with pytest.raises(ValidationError, match="unknown backbone"):
            embed_patches(job)

    def test_pretrained_download_failure_is_clean(self, patch_dir, tmp_path, monkeypatch):
        def refuse(name, weights=None):
            if weights is not None:
                raise RuntimeError("connection refused")
            raise AssertionError("should not build an unweighted model here")

        monkeypatch.setattr(backbones.models, "get_model", refuse)
        job = make_job(patch_dir, tmp_path / "s.bag")
        job.weights = "pretrained"
        with pytest.raises(SetupError, match="weights none"):
            embed_patches(job)


class TestCoordsCsv:
    def write(self, tmp_path, text):
        p = tmp_path / "coords.csv"
        p.write_text(text)
        return p

    def test_parses_rows(self, tmp_path):
        p = self.write(tmp_path, "filename,x,y\na.ppm,0,256\nb.ppm,64,0\n")
        assert read_coords_csv(p) == [("a.ppm", 0, 256), ("b.ppm", 64, 0)]

    def test_bad_header(self, tmp_path):
        p = self.write(tmp_path, "file,x,y\na.ppm,0,0\n")
        with pytest.raises(ValidationError, match="header"):
            read_coords_csv(p)

    def test_non_integer(self, tmp_path):
        p = self.write(tmp_path, "filename,x,y\na.ppm,zero,0\n")
        with pytest.raises(ValidationError, match="line 2"):
            read_coords_csv(p)

    def test_negative(self, tmp_path):
        p = self.write(tmp_path, "filename,x,y\na.ppm,-4,0\n")
        with pytest.raises(ValidationError, match="negative"):
            read_coords_csv(p)

    def test_empty(self, tmp_path):
        p = self.write(tmp_path, "filename,x,y\n")
        with pytest.raises(ValidationError, match="no patch rows"):
            read_coords_csv(p)


class TestCli:
    def setup_corpus(self, tmp_path, n=3):
        d = tmp_path / "patches"
        d.mkdir()
        rng = np.random.default_rng(9)
        lines = ["filename,x,y"]
        for i in range(n):
            write_ppm(d / f"p{i}.ppm", rng)
            lines.append(f"p{i}.ppm,{64 * i},0")
        coords = tmp_path / "coords.csv"
        coords.write_text("\n".join(lines) + "\n")
        return d, coords

    def test_embed_then_verify(self, tmp_path):
        patches, coords = self.setup_corpus(tmp_path)
        out = tmp_path / "s.bag"
        runner = CliRunner()
        res = runner.invoke(
            main,
            ["embed", "--patches", str(patches), "--coords", str(coords),
             "--backbone", "resnet34", "--out", str(out)],
            catch_exceptions=False,
        )
        assert res.exit_code == 0
        assert "embedded 3 patches at width 512" in res.output
        res = runner.invoke(main, ["verify", "--bag", str(out)], catch_exceptions=False)
        assert res.exit_code == 0
        assert "OK" in res.output

    def test_verify_truncated_exits_nonzero(self, tmp_path):
        patches, coords = self.setup_corpus(tmp_path)
        out = tmp_path / "s.bag"
        runner = CliRunner()
        runner.invoke(
            main,
            ["embed", "--patches", str(patches), "--coords", str(coords),
             "--backbone", "resnet34", "--out", str(out)],
            catch_exceptions=False,
        )
        out.write_bytes(out.read_bytes()[:-3])
        res = runner.invoke(main, ["verify", "--bag", str(out)])
        assert res.exit_code == 1
        assert "MISMATCH" in res.output

    def test_bad_coords_exit_2(self, tmp_path):
        patches, _ = self.setup_corpus(tmp_path)
        coords = tmp_path / "bad.csv"
        coords.write_text("wrong,header,here\n")
        res = CliRunner().invoke(
            main,
            ["embed", "--patches", str(patches), "--coords", str(coords),
             "--backbone", "resnet34", "--out", str(tmp_path / "s.bag")],
        )
        assert res.exit_code == 2

    def test_unknown_backbone_rejected_by_parser(self, tmp_path):
        patches, coords = self.setup_corpus(tmp_path)
        res = CliRunner().invoke(
            main,
            ["embed", "--patches", str(patches), "--coords", str(coords),
             "--backbone", "vgg11", "--out", str(tmp_path / "s.bag")],
        )
        assert res.exit_code == 2
