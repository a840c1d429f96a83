import numpy as np
import pytest

from hyperfield.errors import FormatError, GeometryError, ValidationError
from hyperfield.pointcloud import (
    PointCloud,
    nearest_distances,
    nearest_neighbors,
    nearest_neighbors_brute,
    read_ply,
    write_ply,
)
from hyperfield.spatial_metrics import (
    PrCurve,
    RigidTransform,
    icp_align,
    pr_sweep,
    precision_recall,
)


def rand_cloud(seed, n=100, scale=1.0):
    rng = np.random.default_rng(seed)
    return PointCloud(points=rng.uniform(-scale, scale, (n, 3)))


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TestNearestNeighbors:
    def test_self_distances_zero(self):
        cloud = rand_cloud(0)
        assert np.allclose(nearest_distances(cloud, cloud), 0.0)

    def test_single_points(self):
        a = PointCloud(points=np.array([[0.0, 0.0, 0.0]]))
        b = PointCloud(points=np.array([[0.0, 0.0, 3.0]]))
        assert np.allclose(nearest_distances(a, b), [3.0])

    def test_kdtree_matches_brute_force(self):
        a = rand_cloud(1, n=500)
        b = rand_cloud(2, n=700)
        idx_b, d_b = nearest_neighbors_brute(a.points, b.points)
        idx_k, d_k = nearest_neighbors(a, b, backend="kdtree")
        assert np.array_equal(idx_b, idx_k)
        assert np.allclose(d_b, d_k, rtol=0, atol=1e-12)

    def test_unknown_backend(self):
        a = rand_cloud(0, n=4)
        with pytest.raises(ValidationError):
            nearest_neighbors(a, a, backend="quadtree")


class TestPrecisionRecall:
    def test_identical_clouds(self):
        cloud = rand_cloud(3)
        for eps in (0.0, 0.001, 1.0):
            p, r, f = precision_recall(cloud, cloud, eps)
            assert p == r == f == 1.0

    def test_threshold_exclusion(self):
        sc = PointCloud(points=np.array([[0.0, 0.0, 0.0]]))
        gt = PointCloud(points=np.array([[0.0, 0.0, 0.003]]))
        p, r, f = precision_recall(sc, gt, 0.002)
        assert p == r == f == 0.0

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(4)
        sc = PointCloud(points=rng.uniform(-1, 1, (800, 3)))
        gt = PointCloud(points=rng.uniform(-1, 1, (900, 3)))
        eps = 0.2
        d_sc = nearest_neighbors_brute(sc.points, gt.points)[1]
        d_gt = nearest_neighbors_brute(gt.points, sc.points)[1]
        p_ref = (d_sc <= eps).mean()
        r_ref = (d_gt <= eps).mean()
        f_ref = 2 * p_ref * r_ref / (p_ref + r_ref)
        p, r, f = precision_recall(sc, gt, eps)
        assert (p, r) == (p_ref, r_ref)
        assert abs(f - f_ref) < 1e-15

    def test_duality(self):
        sc = rand_cloud(5, n=60)
        gt = rand_cloud(6, n=80)
        eps = 0.3
        assert precision_recall(sc, gt, eps)[0] == precision_recall(gt, sc, eps)[1]

    def test_monotone_in_threshold(self):
        sc = rand_cloud(7, n=50)
        gt = rand_cloud(8, n=50)
        values = [precision_recall(sc, gt, e) for e in (0.05, 0.1, 0.2, 0.5, 4.0)]
        ps = [v[0] for v in values]
        rs = [v[1] for v in values]
        assert ps == sorted(ps) and rs == sorted(rs)
        assert values[-1][0] == values[-1][1] == 1.0  # threshold >= diameter

    def test_negative_threshold_rejected(self):
        cloud = rand_cloud(9, n=5)
        with pytest.raises(ValidationError):
            precision_recall(cloud, cloud, -0.1)


class TestIcp:
    def test_identity_on_equal_clouds(self):
        cloud = rand_cloud(10, n=200, scale=0.25)
        transform, rms = icp_align(cloud, cloud)
        assert rms < 1e-12
        assert np.abs(transform.rotation - np.eye(3)).max() < 1e-9
        assert np.abs(transform.translation).max() < 1e-9

    def test_recovers_known_transform(self):
        rng = np.random.default_rng(11)
        source = PointCloud(points=rng.uniform(-0.25, 0.25, (300, 3)))
        rot = rotation_z(np.radians(8.0))
        trans = np.array([0.02, -0.01, 0.015])
        target = PointCloud(points=source.points @ rot.T + trans)
        transform, rms = icp_align(source, target)
        rot_err = np.arccos(
            np.clip((np.trace(transform.rotation @ rot.T) - 1.0) / 2.0, -1.0, 1.0)
        )
        assert rot_err < 1e-6
        assert np.abs(transform.translation - trans).max() < 1e-6
        assert rms < 1e-6

    def test_rms_nonincreasing(self):
        rng = np.random.default_rng(12)
        source = PointCloud(points=rng.uniform(-0.25, 0.25, (200, 3)))
        rot = rotation_z(np.radians(6.0))
        target = PointCloud(points=source.points @ rot.T + 0.01)
        history = []
        transform = RigidTransform.identity()
        from hyperfield.spatial_metrics import _rigid_fit

        for _ in range(10):
            moved = transform.apply(source.points)
            idx, dist = nearest_neighbors(PointCloud(points=moved), target)
            history.append(float(np.sqrt((dist**2).mean())))
            transform = _rigid_fit(source.points, target.points[idx])
        assert all(a >= b - 1e-12 for a, b in zip(history, history[1:]))

    def test_two_point_degenerate(self):
        a = PointCloud(points=np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        with pytest.raises(GeometryError):
            icp_align(a, a)

    def test_collinear_degenerate(self):
        pts = np.linspace(0, 1, 10)[:, None] * np.array([[1.0, 2.0, 3.0]])
        cloud = PointCloud(points=pts)
        with pytest.raises(GeometryError):
            icp_align(cloud, cloud)


class TestPrSweep:
    def test_identical_flat_curve(self, tmp_path):
        cloud = rand_cloud(13, n=150)
        grid = np.arange(0.001, 0.011, 0.001)
        curve = pr_sweep(cloud, cloud, grid, align=False, out_dir=tmp_path)
        assert curve.thresholds.size == 10
        assert np.allclose(curve.precision, 1.0)
        assert np.allclose(curve.recall, 1.0)
        assert np.allclose(curve.fscore, 1.0)
        assert curve.best_f_percent == 100.0
        assert curve.best_eps == pytest.approx(0.001)  # smallest among ties
        assert (tmp_path / "pr_curve.csv").exists()
        assert (tmp_path / "pr_curve.png").exists()

    def test_fscore_monotone_for_noisy_subsample(self):
        rng = np.random.default_rng(14)
        normals = rng.normal(size=(2000, 3))
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        dense = PointCloud(points=0.05 * normals)
        sub = PointCloud(points=dense.points[:500] + rng.normal(0, 5e-4, (500, 3)))
        grid = np.linspace(2e-4, 5e-3, 12)
        curve = pr_sweep(sub, dense, grid, align=False)
        assert (np.diff(curve.fscore) >= -1e-12).all()

    def test_alignment_recovers_f(self):
        rng = np.random.default_rng(15)
        base = PointCloud(points=rng.uniform(-0.2, 0.2, (400, 3)))
        rot = rotation_z(np.radians(5.0))
        moved = PointCloud(points=base.points @ rot.T + 0.01)
        grid = [0.0005, 0.001, 0.002]
        aligned = pr_sweep(moved, base, grid, align=True)
        unaligned = pr_sweep(moved, base, grid, align=False)
        assert aligned.best_f >= unaligned.best_f
        assert aligned.best_f > 0.999

    def test_empty_grid(self):
        cloud = rand_cloud(16, n=10)
        with pytest.raises(ValidationError):
            pr_sweep(cloud, cloud, [])


class TestPly:
    def test_round_trip_points_only(self, tmp_path):
        cloud = rand_cloud(17, n=40)
        write_ply(cloud, tmp_path / "c.ply")
        back = read_ply(tmp_path / "c.ply")
        assert np.array_equal(back.points, cloud.points)
        assert back.spectra is None

    def test_round_trip_with_spectra(self, tmp_path):
        rng = np.random.default_rng(18)
        cloud = PointCloud(
            points=rng.uniform(-1, 1, (25, 3)),
            spectra=rng.uniform(0, 1, (25, 4)),
            wavelengths=np.linspace(400, 1000, 4),
        )
        write_ply(cloud, tmp_path / "s.ply")
        back = read_ply(tmp_path / "s.ply")
        assert np.array_equal(back.points, cloud.points)
        assert np.array_equal(back.spectra, cloud.spectra)
        assert np.array_equal(back.wavelengths, cloud.wavelengths)

    def test_colored_ply_readable_points(self, tmp_path):
        rng = np.random.default_rng(19)
        cloud = PointCloud(points=rng.uniform(-1, 1, (10, 3)))
        colors = rng.integers(0, 256, (10, 3), dtype=np.uint8)
        write_ply(cloud, tmp_path / "col.ply", colors=colors)
        back = read_ply(tmp_path / "col.ply")
        assert np.array_equal(back.points, cloud.points)
        text = (tmp_path / "col.ply").read_text()
        assert "property uchar red" in text

    def test_not_a_ply(self, tmp_path):
        (tmp_path / "x.ply").write_text("obj\n")
        with pytest.raises(FormatError):
            read_ply(tmp_path / "x.ply")

    def test_truncated_body(self, tmp_path):
        cloud = rand_cloud(20, n=8)
        write_ply(cloud, tmp_path / "t.ply")
        lines = (tmp_path / "t.ply").read_text().splitlines()
        (tmp_path / "t.ply").write_text("\n".join(lines[:-2]) + "\n")
        with pytest.raises(FormatError):
            read_ply(tmp_path / "t.ply")

    def test_minimum_one_point(self):
        with pytest.raises(ValidationError):
            PointCloud(points=np.empty((0, 3)))
