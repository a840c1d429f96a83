import json

import numpy as np
import pytest

from hyperfield.cli import main
from hyperfield.cube import CubeKind, HyperCube, Mask, read_cube, write_cube
from hyperfield.images import mask_to_png, read_png
from hyperfield.pointcloud import PointCloud, write_ply


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    code = run(
        "synth", "--views", "6", "--bands", "4", "--size", "16",
        "--seed", "7", "--out", str(out),
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_ckpt(synth_dir, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    code = run(
        "train", "--dataset", str(synth_dir), "--out", str(ckpt),
        "--pretrain-iters", "6", "--finetune-iters", "4", "--rays", "32",
        "--coarse-samples", "8", "--fine-samples", "8",
        "--trunk-layers", "1", "--trunk-width", "8",
        "--radiance-layers", "1", "--radiance-width", "8",
        "--pos-freq", "2", "--dir-freq", "1", "--seed", "1",
    )
    assert code == 0
    return ckpt


class TestSynth:
    def test_outputs_and_manifest(self, synth_dir):
        assert (synth_dir / "dataset.json").exists()
        assert (synth_dir / "manifest.json").exists()
        assert len(list(synth_dir.glob("view_*.bil"))) == 6
        manifest = json.loads((synth_dir / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 7
        assert "duration_s" in manifest

    def test_deterministic_outputs(self, tmp_path):
        for sub in ("a", "b"):
            assert run("synth", "--views", "3", "--bands", "3", "--size", "8",
                       "--seed", "3", "--out", str(tmp_path / sub)) == 0
        a = (tmp_path / "a" / "view_000.bil").read_bytes()
        b = (tmp_path / "b" / "view_000.bil").read_bytes()
        assert a == b

    def test_usage_error_exit_2(self):
        assert run("synth", "--views") == 2

    def test_unknown_subcommand_exit_2(self):
        assert run("frobnicate") == 2


class TestCalibrate:
    def test_pipeline(self, tmp_path):
        rng = np.random.default_rng(0)
        illum = np.linspace(0.5, 1.5, 4)
        wr = HyperCube(
            data=np.tile(illum.astype(np.float32), (8, 8, 1)),
            wavelengths=np.linspace(400, 1000, 4),
        )
        write_cube(wr, tmp_path / "wr")
        reflectance = rng.uniform(0.1, 0.9, (8, 8, 4)).astype(np.float32)
        raw = HyperCube(
            data=reflectance * illum.astype(np.float32),
            wavelengths=np.linspace(400, 1000, 4),
        )
        write_cube(raw, tmp_path / "raw")
        mask_to_png(Mask(values=np.ones((8, 8), bool)), tmp_path / "roi.png")
        code = run(
            "calibrate", "--wr", str(tmp_path / "wr"), "--roi", str(tmp_path / "roi.png"),
            "--percentile", "70", "--window", "1",
            "--in", str(tmp_path / "raw"), "--out", str(tmp_path / "cal"),
        )
        assert code == 0
        out = read_cube(tmp_path / "cal")
        assert out.kind is CubeKind.CALIBRATED
        assert np.abs(out.data - reflectance).max() < 1e-5
        assert (tmp_path / "cal.manifest.json").exists()

    def test_missing_input_exit_1(self, tmp_path):
        code = run(
            "calibrate", "--wr", str(tmp_path / "nope"), "--roi", str(tmp_path / "roi.png"),
            "--in", str(tmp_path / "raw"), "--out", str(tmp_path / "cal"),
        )
        assert code == 1


class TestSweepWr:
    def test_report(self, tmp_path):
        ys, xs = np.mgrid[0:16, 0:16]
        rho = np.sqrt(((ys - 7.5) / 7.5) ** 2 + ((xs - 7.5) / 7.5) ** 2) / np.sqrt(2)
        vignette = 1.0 - 0.3 * np.clip((rho - 0.6) / 0.4, 0, None) ** 2
        data = (vignette[..., None] * np.ones(3)).astype(np.float32)
        write_cube(
            HyperCube(data=data, wavelengths=[400.0, 600.0, 800.0]), tmp_path / "wr"
        )
        mask_to_png(Mask(values=np.ones((16, 16), bool)), tmp_path / "roi.png")
        code = run(
            "sweep-wr", "--wr", str(tmp_path / "wr"), "--roi", str(tmp_path / "roi.png"),
            "--percentiles", "65,70,75", "--out", str(tmp_path / "sweep"),
        )
        assert code == 0
        csv_text = (tmp_path / "sweep" / "wr_sweep.csv").read_text()
        assert csv_text.splitlines()[0] == "p,pixel_count,median_D,p95_D,max_D"
        assert len(csv_text.splitlines()) == 4
        assert (tmp_path / "sweep" / "manifest.json").exists()


class TestTrainRenderEval:
    def test_checkpoint_products(self, trained_ckpt):
        assert trained_ckpt.exists()
        pre = trained_ckpt.parent / "model_pretrain.ckpt"
        assert pre.exists()
        assert (trained_ckpt.parent / "model.ckpt.manifest.json").exists()

    def test_render_view(self, synth_dir, trained_ckpt, tmp_path):
        out = tmp_path / "render"
        code = run(
            "render", "--ckpt", str(trained_ckpt), "--dataset", str(synth_dir),
            "--view", "0", "--out", str(out),
            "--coarse-samples", "8", "--fine-samples", "8",
            "--depth-png", str(tmp_path / "d.png"), "--acc-png", str(tmp_path / "a.png"),
        )
        assert code == 0
        cube = read_cube(out)
        assert cube.data.shape == (16, 16, 4)
        assert (tmp_path / "d.png").exists() and (tmp_path / "a.png").exists()

    def test_render_bad_view_exit_1(self, synth_dir, trained_ckpt, tmp_path):
        code = run(
            "render", "--ckpt", str(trained_ckpt), "--dataset", str(synth_dir),
            "--view", "99", "--out", str(tmp_path / "r"),
        )
        assert code == 1

    def test_eval_spectral(self, synth_dir, trained_ckpt, tmp_path):
        out = tmp_path / "eval"
        code = run(
            "eval-spectral", "--ckpt", str(trained_ckpt), "--dataset", str(synth_dir),
            "--out", str(out), "--coarse-samples", "8", "--fine-samples", "8",
        )
        assert code == 0
        csv_lines = (out / "spectral_metrics.csv").read_text().splitlines()
        assert csv_lines[0] == "dataset,view_id,sam_rad,rmse,ssim,psnr_db"
        assert any("mean+/-sd" in line for line in csv_lines)
        assert any("rays_per_view" in line for line in csv_lines)
        assert list(out.glob("compare_view_*.png"))

    def test_extract(self, trained_ckpt, tmp_path):
        out = tmp_path / "cloud.ply"
        code = run(
            "extract", "--ckpt", str(trained_ckpt), "--out", str(out),
            "--resolution", "16", "--sigma-min", "0.0001",
        )
        assert code == 0
        assert out.exists()


class TestEvalSpatial:
    def test_pr_outputs(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-0.1, 0.1, (300, 3))
        write_ply(PointCloud(points=pts), tmp_path / "a.ply")
        write_ply(PointCloud(points=pts + rng.normal(0, 1e-4, pts.shape)), tmp_path / "b.ply")
        out = tmp_path / "pr"
        code = run(
            "eval-spatial", "--pred", str(tmp_path / "a.ply"), "--gt", str(tmp_path / "b.ply"),
            "--eps-grid", "0.001:0.01:0.001", "--out", str(out),
        )
        assert code == 0
        lines = (out / "pr_curve.csv").read_text().splitlines()
        assert lines[0] == "epsilon_m,precision,recall,fscore"
        assert len(lines) == 11  # 10 thresholds
        assert (out / "pr_curve.png").exists()

    def test_bad_grid_exit_1(self, tmp_path):
        rng = np.random.default_rng(0)
        write_ply(PointCloud(points=rng.uniform(0, 1, (10, 3))), tmp_path / "a.ply")
        code = run(
            "eval-spatial", "--pred", str(tmp_path / "a.ply"), "--gt", str(tmp_path / "a.ply"),
            "--eps-grid", "oops", "--out", str(tmp_path / "pr"),
        )
        assert code == 1


class TestComposite:
    def test_png_and_spectrum(self, synth_dir, tmp_path):
        code = run(
            "composite", "--cube", str(synth_dir / "view_000"),
            "--r", "900", "--g", "700", "--b", "450",
            "--out", str(tmp_path / "comp.png"),
            "--roi", str(synth_dir / "mask_000.png"),
            "--spectrum-csv", str(tmp_path / "spec.csv"),
        )
        assert code == 0
        img = read_png(tmp_path / "comp.png")
        assert img.shape == (16, 16, 3)
        lines = (tmp_path / "spec.csv").read_text().splitlines()
        assert lines[0] == "wavelength_nm,reflectance"
        assert len(lines) == 5  # 4 bands

    def test_raw_cube_rejected_exit_1(self, tmp_path):
        cube = HyperCube(
            data=np.random.default_rng(0).uniform(0, 2, (4, 4, 3)).astype(np.float32),
            wavelengths=[400.0, 600.0, 800.0],
            kind=CubeKind.RAW,
        )
        write_cube(cube, tmp_path / "raw")
        code = run(
            "composite", "--cube", str(tmp_path / "raw"),
            "--r", "800", "--g", "600", "--b", "400",
            "--out", str(tmp_path / "c.png"),
        )
        assert code == 1


class TestConfigFile:
    def test_config_file_defaults_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"views": 4, "bands": 5}))
        out = tmp_path / "ds"
        code = run(
            "--config", str(cfg), "synth", "--size", "8", "--seed", "0",
            "--bands", "3", "--out", str(out),
        )
        assert code == 0
        meta = json.loads((out / "dataset.json").read_text())
        assert meta["n_views"] == 4  # from config file
        assert len(meta["wavelengths_nm"]) == 3  # explicit flag wins
