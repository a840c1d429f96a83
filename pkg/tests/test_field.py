import numpy as np
import pytest

from hyperfield.errors import FormatError, ValidationError
from hyperfield.field import (
    Checkpoint,
    FieldConfig,
    FieldParams,
    backward,
    derived_normal,
    encode,
    init_params,
    load_checkpoint,
    n_params,
    query,
    query_batch,
    query_density,
    save_checkpoint,
)

UNIT_AABB = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def small_config(predict_normals=True, n_channels=3):
    return FieldConfig(
        n_channels=n_channels,
        aabb=UNIT_AABB,
        pos_frequencies=3,
        dir_frequencies=2,
        trunk_layers=2,
        trunk_width=16,
        radiance_layers=1,
        radiance_width=16,
        predict_normals=predict_normals,
        dtype="float64",
    )


def unit_dirs(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


class TestEncode:
    def test_output_length(self):
        assert encode(np.zeros((1, 3)), 6).shape == (1, 39)
        assert encode(np.zeros((5, 3)), 1).shape == (5, 9)

    def test_zero_input(self):
        out = encode(np.zeros((1, 3)), 1)[0]
        assert np.allclose(out[:3], 0.0)  # identity part
        assert np.allclose(out[3:6], 0.0)  # sin
        assert np.allclose(out[6:9], 1.0)  # cos

    def test_parity(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (4, 3))
        plus = encode(x, 4)
        minus = encode(-x, 4)
        # identity and sin components are odd, cos components even
        feats = plus.shape[1]
        for f in range(feats):
            block = (f - 3) // 3 if f >= 3 else -1
            odd = f < 3 or (block % 2 == 0)
            if odd:
                assert np.allclose(minus[:, f], -plus[:, f], atol=1e-12)
            else:
                assert np.allclose(minus[:, f], plus[:, f], atol=1e-12)


class TestQuery:
    def test_density_direction_invariant(self):
        params = init_params(small_config(), seed=0)
        rng = np.random.default_rng(1)
        x = rng.uniform(-0.9, 0.9, (10, 3))
        d1 = query_batch(params, x, unit_dirs(rng, 10)).density
        d2 = query_batch(params, x, unit_dirs(rng, 10)).density
        assert np.array_equal(d1, d2)  # bit-exact: density ignores direction

    def test_radiance_in_unit_interval(self):
        params = init_params(small_config(), seed=2)
        rng = np.random.default_rng(3)
        batch = query_batch(params, rng.uniform(-1, 1, (20, 3)), unit_dirs(rng, 20))
        assert batch.radiance.shape == (20, 3)
        assert batch.radiance.min() > 0.0 and batch.radiance.max() < 1.0

    def test_density_nonnegative(self):
        params = init_params(small_config(), seed=4)
        rng = np.random.default_rng(5)
        assert query_density(params, rng.uniform(-1, 1, (50, 3))).min() >= 0.0

    def test_zeroed_density_layer(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        params.view("density.w")[:] = 0.0
        params.view("density.b")[:] = 0.0
        sigma = query_density(params, np.zeros((4, 3)))
        # softplus evaluated at the configured bias, scaled
        expected = (
            cfg.density_scale * np.log1p(np.exp(cfg.density_bias)) / cfg.scene_diag()
        )
        assert np.allclose(sigma, expected, atol=1e-12)

    def test_non_unit_direction_rejected(self):
        params = init_params(small_config(), seed=0)
        with pytest.raises(ValidationError):
            query_batch(params, np.zeros((1, 3)), np.array([[0.0, 0.0, 2.0]]))

    def test_single_point_query(self):
        params = init_params(small_config(), seed=0)
        out = query(params, np.array([0.1, 0.2, 0.3]), np.array([0.0, 0.0, 1.0]))
        assert out.density >= 0.0
        assert out.radiance.shape == (3,)
        assert abs(np.linalg.norm(out.predicted_normal) - 1.0) < 1e-9
        assert out.density_gradient.shape == (3,)

    def test_determinism_same_seed(self):
        a = init_params(small_config(), seed=7)
        b = init_params(small_config(), seed=7)
        assert np.array_equal(a.theta, b.theta)
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (5, 3))
        d = unit_dirs(rng, 5)
        assert np.array_equal(
            query_batch(a, x, d).radiance, query_batch(b, x, d).radiance
        )

    def test_no_camera_parameters(self):
        params = init_params(small_config(), seed=0)
        for name in params.names:
            assert "camera" not in name and "pose" not in name


def rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


class TestGradients:
    def test_parameter_gradients_match_fd(self):
        cfg = small_config()
        rng = np.random.default_rng(11)
        params = init_params(cfg, seed=11)
        m = 8
        x = rng.uniform(-0.9, 0.9, (m, 3))
        d = unit_dirs(rng, m)
        adj = {
            "adj_density": rng.normal(size=m),
            "adj_radiance": rng.normal(size=(m, 3)),
            "adj_density_gradient": rng.normal(size=(m, 3)),
            "adj_predicted_normal": rng.normal(size=(m, 3)),
        }

        def scalar(theta):
            p = FieldParams(config=cfg, theta=theta)
            b = query_batch(p, x, d, sigma_grad=True, pred_normal=True)
            return (
                (adj["adj_density"] * b.density).sum()
                + (adj["adj_radiance"] * b.radiance).sum()
                + (adj["adj_density_gradient"] * b.density_gradient).sum()
                + (adj["adj_predicted_normal"] * b.predicted_normal).sum()
            )

        batch = query_batch(params, x, d, sigma_grad=True, pred_normal=True, keep_tape=True)
        analytic = backward(params, batch, **adj)
        h = 1e-4
        theta = params.theta
        fd = np.zeros_like(analytic)
        for i in range(theta.size):
            plus, minus = theta.copy(), theta.copy()
            plus[i] += h
            minus[i] -= h
            fd[i] = (scalar(plus) - scalar(minus)) / (2 * h)
        assert rel_err(analytic, fd).max() < 1e-4

    def test_density_gradient_matches_fd(self):
        params = init_params(small_config(), seed=3)
        rng = np.random.default_rng(4)
        x = rng.uniform(-0.9, 0.9, (6, 3))
        batch = query_batch(params, x, radiance=False, sigma_grad=True)
        h = 1e-4
        fd = np.zeros((6, 3))
        for i in range(6):
            for a in range(3):
                plus, minus = x[i].copy(), x[i].copy()
                plus[a] += h
                minus[a] -= h
                fd[i, a] = (
                    query_density(params, plus[None])[0]
                    - query_density(params, minus[None])[0]
                ) / (2 * h)
        assert rel_err(batch.density_gradient, fd, floor=1e-8).max() < 1e-4

    def test_zero_adjoints_zero_gradient(self):
        params = init_params(small_config(), seed=5)
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, (4, 3))
        batch = query_batch(params, x, unit_dirs(rng, 4), keep_tape=True)
        grad = backward(params, batch, adj_density=np.zeros(4), adj_radiance=np.zeros((4, 3)))
        assert np.allclose(grad, 0.0)

    def test_backward_requires_tape(self):
        params = init_params(small_config(), seed=0)
        batch = query_batch(params, np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]))
        with pytest.raises(ValidationError):
            backward(params, batch, adj_density=np.ones(1))

    def test_query_batch_with_grad_wrapper(self):
        from hyperfield.field import query_batch_with_grad

        params = init_params(small_config(), seed=8)
        rng = np.random.default_rng(9)
        x = rng.uniform(-0.9, 0.9, (5, 3))
        d = unit_dirs(rng, 5)
        adj_sigma = rng.normal(size=5)
        batch, grad, sigma_grad = query_batch_with_grad(params, x, d, adj_density=adj_sigma)
        assert grad.shape == params.theta.shape
        assert sigma_grad.shape == (5, 3)
        # matches the two-call form
        b2 = query_batch(params, x, d, sigma_grad=True, pred_normal=True, keep_tape=True)
        g2 = backward(params, b2, adj_density=adj_sigma)
        assert np.array_equal(grad, g2)


class TestDerivedNormal:
    def test_axis_case(self):
        normals, valid = derived_normal(np.array([[0.0, 0.0, -5.0]]))
        assert valid[0]
        assert np.allclose(normals[0], [0.0, 0.0, 1.0])

    def test_unit_length(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=(50, 3))
        normals, valid = derived_normal(grads)
        assert valid.all()
        assert np.abs(np.linalg.norm(normals, axis=-1) - 1.0).max() < 1e-12

    def test_scale_invariance(self):
        g = np.array([[0.3, -0.4, 0.5]])
        n1, _ = derived_normal(g)
        n2, _ = derived_normal(1000.0 * g)
        assert np.allclose(n1, n2, atol=1e-12)

    def test_degenerate_flagged(self):
        normals, valid = derived_normal(np.array([[0.0, 0.0, 0.0], [1e-15, 0.0, 0.0]]))
        assert not valid.any()
        assert np.allclose(normals, 0.0)


class TestParams:
    def test_param_count_matches_partition(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        assert params.theta.size == n_params(cfg)

    def test_biases_start_zero(self):
        params = init_params(small_config(), seed=0)
        for name in params.names:
            if name.endswith(".b"):
                assert np.allclose(params.view(name), 0.0)

    def test_theta_size_validation(self):
        cfg = small_config()
        with pytest.raises(ValidationError):
            FieldParams(config=cfg, theta=np.zeros(10))

    def test_views_share_memory(self):
        params = init_params(small_config(), seed=0)
        params.view("density.b")[:] = 3.25
        offset = params.theta[np.abs(params.theta - 3.25) < 1e-12]
        assert offset.size == 1


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        params = init_params(small_config(), seed=12)
        meta = {"wavelengths_nm": [400.0, 650.0, 900.0]}
        extra = {"adam_m": np.arange(4.0), "adam_v": np.ones(2, dtype=np.float32)}
        save_checkpoint(tmp_path / "f.ckpt", params, step=17, meta=meta, extra=extra)
        ckpt = load_checkpoint(tmp_path / "f.ckpt")
        assert isinstance(ckpt, Checkpoint)
        assert ckpt.step == 17
        assert ckpt.meta["wavelengths_nm"] == meta["wavelengths_nm"]
        assert np.array_equal(ckpt.params.theta, params.theta)
        assert ckpt.params.config == params.config
        assert np.array_equal(ckpt.extra["adam_m"], extra["adam_m"])
        assert ckpt.extra["adam_v"].dtype == np.float32

    def test_bad_magic(self, tmp_path):
        (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint\n")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "junk.ckpt")

    def test_truncated_payload(self, tmp_path):
        params = init_params(small_config(), seed=0)
        save_checkpoint(tmp_path / "f.ckpt", params)
        raw = (tmp_path / "f.ckpt").read_bytes()
        (tmp_path / "f.ckpt").write_bytes(raw[:-16])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "f.ckpt")

    def test_float32_round_trip(self, tmp_path):
        cfg = FieldConfig(n_channels=2, aabb=UNIT_AABB, trunk_layers=1, trunk_width=8,
                          radiance_layers=1, radiance_width=8, pos_frequencies=2,
                          dir_frequencies=1, dtype="float32")
        params = init_params(cfg, seed=1)
        assert params.theta.dtype == np.float32
        save_checkpoint(tmp_path / "f32.ckpt", params)
        back = load_checkpoint(tmp_path / "f32.ckpt")
        assert back.params.theta.dtype == np.float32
        assert np.array_equal(back.params.theta, params.theta)
