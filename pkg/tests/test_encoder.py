"""Encoder forward/backward, GeM pooling, optimizer, and checkpoints."""

import numpy as np
import pytest

from gidp import encoder as enc
from gidp.errors import FormatError, LayoutMismatchError
from gidp.pointcloud import PointCloud


def rand_cloud(rng, n=16):
    return PointCloud(rng.normal(0, 0.6, size=(n, 3)))


def fd_gradient(params, batch, loss_head, h=1e-5, **kw):
    """Central finite differences over every parameter coordinate."""
    num = np.zeros(params.flat.size)
    for j in range(params.flat.size):
        fp, fm = params.copy(), params.copy()
        fp.flat[j] += h
        fm.flat[j] -= h
        num[j] = (enc.backward(fp, batch, loss_head, **kw)[0] - enc.backward(fm, batch, loss_head, **kw)[0]) / (2 * h)
    return num


def max_rel_err(a, b, floor=1e-3):
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


class TestLayoutAndInit:
    def test_flat_length_matches_arithmetic(self):
        layout = enc.make_layout((3, 64, 128, 256))
        expected = (3 * 64 + 64) + (64 * 128 + 128) + (128 * 256 + 256) + 1 + 2 * (256 * 256 + 256)
        assert layout.total_size == expected

    def test_same_seed_bit_identical(self):
        a = enc.init_params(5, (3, 8, 16))
        b = enc.init_params(5, (3, 8, 16))
        assert np.array_equal(a.flat, b.flat)

    def test_gem_p_initialized_to_three(self):
        # gem_p = exp(rho): no rho hits 3.0 exactly in float64, the init is
        # the closest representable (1 ulp)
        params = enc.init_params(0, (3, 4, 4))
        assert abs(params.gem_p - 3.0) <= 1e-15
        assert params.view("gem.rho").shape == (1,)

    def test_biases_zero_weights_bounded(self):
        params = enc.init_params(1, (3, 8, 16))
        assert np.all(params.view("mlp0.b") == 0)
        assert np.abs(params.view("mlp0.W")).max() <= 1 / np.sqrt(3)
        assert np.abs(params.view("mlp1.W")).max() <= 1 / np.sqrt(8)

    def test_manifest_round_trip(self):
        layout = enc.make_layout((3, 8, 16))
        assert enc.ParamLayout.from_manifest_text(layout.manifest_text()) == layout


class TestForward:
    def test_descriptor_is_unit_norm(self):
        rng = np.random.default_rng(2)
        params = enc.init_params(3, (3, 8, 16))
        for _ in range(20):
            v, _ = enc.forward(params, rand_cloud(rng, int(rng.integers(1, 50))))
            assert abs(np.linalg.norm(v) - 1.0) < 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        params = enc.init_params(4, (3, 8, 16))
        pc = rand_cloud(rng, 64)
        v, _ = enc.forward(params, pc)
        for _ in range(10):
            perm = rng.permutation(64)
            v2, _ = enc.forward(params, PointCloud(pc.points[perm]))
            assert np.abs(v - v2).max() < 1e-12

    def test_single_point_cloud(self):
        rng = np.random.default_rng(4)
        params = enc.init_params(5, (3, 8, 16))
        pc = rand_cloud(rng, 1)
        v, feats = enc.forward(params, pc)
        assert feats.shape == (1, 16)
        # GeM of one element is that element
        pooled = feats[0]
        expected = pooled / np.linalg.norm(pooled)
        assert np.allclose(v, expected, atol=1e-12)

    def test_per_point_features_nonnegative(self):
        rng = np.random.default_rng(5)
        params = enc.init_params(6, (3, 8, 16))
        _, feats = enc.forward(params, rand_cloud(rng, 32))
        assert feats.min() >= 0

    def test_encode_matches_forward(self):
        rng = np.random.default_rng(6)
        params = enc.init_params(7, (3, 8, 16))
        clouds = [rand_cloud(rng, int(n)) for n in rng.integers(2, 40, size=7)]
        batch = enc.encode(params, clouds)
        for i, pc in enumerate(clouds):
            v, _ = enc.forward(params, pc)
            assert np.allclose(batch[i], v, atol=1e-12)


class TestGemPool:
    def test_p_one_is_mean(self):
        rng = np.random.default_rng(7)
        feats = rng.uniform(0, 2, (20, 5))
        assert np.allclose(enc.gem_pool(feats, 1.0), feats.mean(axis=0), atol=1e-12)

    def test_closed_form_p2(self):
        feats = np.array([[1.0], [3.0]])
        assert abs(enc.gem_pool(feats, 2.0)[0] - np.sqrt(5.0)) < 1e-12

    def test_large_p_approaches_max(self):
        feats = np.array([[1.0], [3.0]])
        pooled = enc.gem_pool(feats, 64.0)[0]
        assert abs(pooled - 3.0) / 3.0 < 0.03

    def test_monotone_in_p(self):
        rng = np.random.default_rng(8)
        feats = rng.uniform(0, 1.5, (30, 4))
        grid = [0.5, 1.0, 2.0, 3.0, 5.0, 8.0, 16.0, 64.0]
        pooled = np.array([enc.gem_pool(feats, p) for p in grid])
        assert np.all(np.diff(pooled, axis=0) >= -1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            enc.gem_pool(np.ones((2, 2)), 0.0)
        with pytest.raises(ValueError):
            enc.gem_pool(-np.ones((2, 2)), 2.0)


class TestProjectionHead:
    def test_unit_norm_and_pure(self):
        rng = np.random.default_rng(9)
        params = enc.init_params(8, (3, 8, 16))
        v = rng.normal(0, 1, 16)
        u1 = enc.projection_head(params, v)
        u2 = enc.projection_head(params, v)
        assert abs(np.linalg.norm(u1) - 1.0) < 1e-12
        assert np.array_equal(u1, u2)

    def test_zero_weights_nonzero_bias(self):
        rng = np.random.default_rng(10)
        params = enc.init_params(9, (3, 4, 8))
        params.view("proj0.W")[...] = 0
        params.view("proj0.b")[...] = 0
        params.view("proj1.W")[...] = 0
        b = rng.normal(0, 1, 8)
        params.view("proj1.b")[...] = b
        u = enc.projection_head(params, rng.normal(0, 1, 8))
        assert np.allclose(u, b / np.linalg.norm(b), atol=1e-15)


class TestBackward:
    def test_constant_loss_zero_gradient(self):
        rng = np.random.default_rng(11)
        params = enc.init_params(10, (3, 6, 5))
        clouds = [rand_cloud(rng, 6) for _ in range(3)]
        targets = [np.zeros(5) for _ in clouds]  # <v, 0> is constant
        loss, grads = enc.backward(params, list(zip(clouds, targets)), "probe")
        assert loss == 0.0
        assert np.all(grads == 0)

    def test_probe_gradient_matches_fd(self):
        rng = np.random.default_rng(12)
        params = enc.init_params(11, (3, 5, 4))
        batch = [(rand_cloud(rng, 5), rng.normal(0, 1, 4)) for _ in range(2)]
        _, grads = enc.backward(params, batch, "probe")
        assert max_rel_err(grads, fd_gradient(params, batch, "probe")) < 1e-4

    def test_normalization_tangency(self):
        # the pullback of v through v = g/|g| is orthogonal to v
        rng = np.random.default_rng(13)
        params = enc.init_params(12, (3, 6, 5))
        pc = rand_cloud(rng, 8)
        v, _ = enc.forward(params, pc)
        cache = enc._forward_batch(params, pc.points[None])
        grads = enc.EncoderParams(layout=params.layout, flat=np.zeros(params.layout.total_size))
        enc._backward_batch(params, cache, v[None].copy(), grads)
        # cotangent along v itself: normalization kills it, so the gradient
        # w.r.t. pre-normalization output is zero
        safe = cache.norm[0]
        dg = (v - cache.v[0] * float(cache.v[0] @ v)) / safe
        assert np.abs(dg).max() < 1e-12

    def test_unknown_head_rejected(self):
        params = enc.init_params(0, (3, 4, 4))
        with pytest.raises(ValueError, match="unknown loss head"):
            enc.backward(params, [], "nope")


class TestOptimizer:
    def test_zero_gradient_keeps_params(self):
        params = enc.init_params(13, (3, 4, 4))
        state = enc.make_optimizer_state(params.flat.size, lr=0.1)
        new_params, new_state = enc.optimizer_step(params, np.zeros(params.flat.size), state)
        assert np.array_equal(new_params.flat, params.flat)
        assert new_state.step == 1

    def test_first_adam_step_is_signed_lr(self):
        rng = np.random.default_rng(14)
        params = enc.init_params(14, (3, 4, 4))
        g = rng.normal(0, 1, params.flat.size)
        state = enc.make_optimizer_state(params.flat.size, lr=0.01)
        new_params, _ = enc.optimizer_step(params, g, state)
        delta = new_params.flat - params.flat
        # fresh-state Adam: delta = -lr * g / (|g| + eps) ~ -lr * sign(g)
        expected = -0.01 * g / (np.abs(g) + 1e-8)
        assert np.allclose(delta, expected, atol=1e-15)
        assert np.all(np.sign(delta[g != 0]) == -np.sign(g[g != 0]))

    def test_sgd_momentum(self):
        params = enc.init_params(15, (3, 4, 4))
        g = np.ones(params.flat.size)
        state = enc.make_optimizer_state(params.flat.size, lr=0.1, kind="sgd", momentum=0.5)
        p1, state = enc.optimizer_step(params, g, state)
        p2, state = enc.optimizer_step(p1, g, state)
        # velocities: 1 then 1.5
        assert np.allclose(params.flat - p1.flat, 0.1, atol=1e-15)
        assert np.allclose(p1.flat - p2.flat, 0.15, atol=1e-15)

    def test_identical_trajectories(self):
        rng1, rng2 = np.random.default_rng(15), np.random.default_rng(15)
        params1 = enc.init_params(16, (3, 4, 4))
        params2 = enc.init_params(16, (3, 4, 4))
        s1 = enc.make_optimizer_state(params1.flat.size, lr=0.05)
        s2 = enc.make_optimizer_state(params2.flat.size, lr=0.05)
        for _ in range(5):
            g1 = rng1.normal(0, 1, params1.flat.size)
            g2 = rng2.normal(0, 1, params2.flat.size)
            params1, s1 = enc.optimizer_step(params1, g1, s1)
            params2, s2 = enc.optimizer_step(params2, g2, s2)
        assert np.array_equal(params1.flat, params2.flat)

    def test_layout_mismatch(self):
        params = enc.init_params(17, (3, 4, 4))
        state = enc.make_optimizer_state(params.flat.size, lr=0.1)
        with pytest.raises(LayoutMismatchError):
            enc.optimizer_step(params, np.zeros(3), state)


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        params = enc.init_params(18, (3, 8, 16))
        path = tmp_path / "p.ckpt"
        enc.save_checkpoint(params, path)
        loaded, opt = enc.load_checkpoint(path)
        assert opt is None
        assert loaded.layout == params.layout
        assert np.array_equal(loaded.flat, params.flat)

    def test_round_trip_with_optimizer(self, tmp_path):
        rng = np.random.default_rng(19)
        params = enc.init_params(19, (3, 6, 5))
        state = enc.make_optimizer_state(params.flat.size, lr=0.01)
        params, state = enc.optimizer_step(params, rng.normal(0, 1, params.flat.size), state)
        path = tmp_path / "p.ckpt"
        enc.save_checkpoint(params, path, state)
        loaded, lstate = enc.load_checkpoint(path)
        assert np.array_equal(loaded.flat, params.flat)
        assert lstate.step == 1 and lstate.kind == "adam"
        assert np.array_equal(lstate.m, state.m)
        assert np.array_equal(lstate.v, state.v)

    def test_wrong_layout_rejected(self, tmp_path):
        params = enc.init_params(20, (3, 8, 16))
        path = tmp_path / "p.ckpt"
        enc.save_checkpoint(params, path)
        with pytest.raises(LayoutMismatchError, match="layout mismatch"):
            enc.load_checkpoint(path, expected_layout=enc.make_layout((3, 4, 16)))

    def test_truncated_file(self, tmp_path):
        params = enc.init_params(21, (3, 8, 16))
        path = tmp_path / "p.ckpt"
        enc.save_checkpoint(params, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(FormatError, match="truncated"):
            enc.load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(FormatError):
            enc.load_checkpoint(path)

    def test_pretrain_checkpoint_loads_for_finetuning(self, tmp_path):
        # projection head travels along and is simply unused downstream
        params = enc.init_params(22, (3, 8, 16))
        path = tmp_path / "p.ckpt"
        enc.save_checkpoint(params, path)
        loaded, _ = enc.load_checkpoint(path, expected_layout=enc.make_layout((3, 8, 16)))
        rng = np.random.default_rng(0)
        pc = rand_cloud(rng, 10)
        assert np.array_equal(enc.forward(loaded, pc)[0], enc.forward(params, pc)[0])
