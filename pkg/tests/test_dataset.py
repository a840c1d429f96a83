import numpy as np
import pytest

from hyperfield.camera import (
    CameraModel,
    Pose,
    read_intrinsics,
    read_poses,
    write_intrinsics,
    write_poses,
)
from hyperfield.dataset import load_dataset
from hyperfield.errors import FormatError
from hyperfield.images import mask_from_png, mask_to_png, read_png, write_png
from hyperfield.cube import Mask
from hyperfield.scene import TurntableConfig, default_scene, default_wavelengths, emit_dataset, pose_ring


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    cam = CameraModel(fx=20.0, fy=20.0, cx=7.5, cy=7.5, width=16, height=16)
    cfg = TurntableConfig(
        n_views=5, radius=0.25, elevation=0.3, look_at=np.zeros(3), intrinsics=cam
    )
    return emit_dataset(
        default_scene(),
        cfg,
        tmp_path_factory.mktemp("ds") / "d",
        wavelengths=default_wavelengths(4),
        seed=1,
    )


class TestLoadDataset:
    def test_shapes_and_split(self, dataset_dir):
        ds = load_dataset(dataset_dir)
        assert ds.images.shape == (5, 16, 16, 4)
        assert ds.masks.shape == (5, 16, 16)
        assert len(ds.poses) == 5
        assert len(ds.train_ids) == 4 and len(ds.eval_ids) == 1
        assert ds.wavelengths.size == 4
        assert ds.scene is not None
        assert ds.aabb.shape == (2, 3)

    def test_images_match_rendered_cubes(self, dataset_dir):
        from hyperfield.cube import read_cube

        ds = load_dataset(dataset_dir)
        cube = read_cube(dataset_dir / "view_002")
        assert np.array_equal(ds.images[2], cube.data)

    def test_view_cube_accessor(self, dataset_dir):
        ds = load_dataset(dataset_dir)
        cube = ds.view_cube(0)
        assert cube.bands == 4

    def test_missing_meta(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset(tmp_path)


class TestPoseFiles:
    def test_round_trip(self, tmp_path):
        cam = CameraModel(fx=20.0, fy=20.0, cx=7.5, cy=7.5, width=16, height=16)
        cfg = TurntableConfig(
            n_views=6, radius=0.4, elevation=0.2, look_at=np.zeros(3), intrinsics=cam
        )
        poses = pose_ring(cfg)
        write_poses(tmp_path / "poses.txt", poses)
        back = read_poses(tmp_path / "poses.txt")
        assert len(back) == 6
        for a, b in zip(poses, back):
            assert np.array_equal(a.rotation, b.rotation)
            assert np.array_equal(a.translation, b.translation)

    def test_external_pose_file_import(self, tmp_path):
        # hand-written file in the documented format is accepted
        rot = np.eye(3).ravel()
        line = "0 " + " ".join(str(v) for v in rot) + " 0.1 -0.2 0.3"
        (tmp_path / "ext.txt").write_text(line + "\n")
        poses = read_poses(tmp_path / "ext.txt")
        assert np.allclose(poses[0].translation, [0.1, -0.2, 0.3])

    def test_malformed_pose_line(self, tmp_path):
        (tmp_path / "bad.txt").write_text("0 1 2 3\n")
        with pytest.raises(FormatError):
            read_poses(tmp_path / "bad.txt")

    def test_intrinsics_round_trip(self, tmp_path):
        cam = CameraModel(fx=81.25, fy=79.5, cx=31.5, cy=30.5, width=64, height=62)
        write_intrinsics(tmp_path / "intr.txt", cam)
        back = read_intrinsics(tmp_path / "intr.txt")
        assert back == cam


class TestImages:
    def test_png_round_trip_gray(self, tmp_path):
        arr = np.random.default_rng(0).integers(0, 256, (9, 7), dtype=np.uint8)
        write_png(arr, tmp_path / "g.png")
        assert np.array_equal(read_png(tmp_path / "g.png"), arr)

    def test_png_round_trip_rgb(self, tmp_path):
        arr = np.random.default_rng(1).integers(0, 256, (5, 6, 3), dtype=np.uint8)
        write_png(arr, tmp_path / "c.png")
        assert np.array_equal(read_png(tmp_path / "c.png"), arr)

    def test_mask_round_trip(self, tmp_path):
        values = np.random.default_rng(2).random((12, 8)) > 0.5
        mask_to_png(Mask(values=values), tmp_path / "m.png")
        assert np.array_equal(mask_from_png(tmp_path / "m.png").values, values)

    def test_png_determinism(self, tmp_path):
        arr = np.random.default_rng(3).integers(0, 256, (16, 16, 3), dtype=np.uint8)
        write_png(arr, tmp_path / "a.png")
        write_png(arr, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


class TestPlotting:
    def test_line_plot_writes_png(self, tmp_path):
        from hyperfield.plotting import line_plot

        x = np.linspace(0, 1, 20)
        line_plot(
            x,
            {"precision": x**0.5, "recall": x, "fscore": x**2},
            tmp_path / "plot.png",
            xlabel="epsilon_m",
            vline=0.4,
        )
        img = read_png(tmp_path / "plot.png")
        assert img.shape == (360, 520, 3)
        # canvas has non-background ink
        assert (img < 250).any()
