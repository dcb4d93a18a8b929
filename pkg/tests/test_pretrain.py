"""InfoNCE, momentum update, negative queue, and the pretraining loop."""

import numpy as np
import pytest

from gidp import encoder as enc
from gidp.errors import LayoutMismatchError
from gidp.pointcloud import AugmentationConfig, PointCloud
from gidp.pretrain import (
    MomentumQueue,
    PretrainConfig,
    info_nce_loss,
    momentum_update,
    pretrain_epoch,
    run_pretraining,
)


def unit(x):
    return np.asarray(x, dtype=np.float64) / np.linalg.norm(x)


def rand_units(rng, k, c):
    return np.array([unit(rng.normal(0, 1, c)) for _ in range(k)])


class TestInfoNCE:
    def test_equal_similarities_give_log_k(self):
        # u_a orthogonal axis trick: positive and negatives all at the same
        # dot product with the anchor
        c = 6
        u_a = np.zeros(c)
        u_a[0] = 1.0
        shared = np.zeros(c)
        shared[0], shared[1] = 0.3, np.sqrt(1 - 0.09)
        negatives = []
        for i in range(4):
            v = np.zeros(c)
            v[0] = 0.3
            v[2 + i] = np.sqrt(1 - 0.09)
            negatives.append(v)
        loss, *_ = info_nce_loss(u_a, shared, np.array(negatives), tau=1.0)
        assert abs(loss - np.log(4)) < 1e-12

    def test_single_equal_negative_gives_zero(self):
        u_a = np.array([1.0, 0.0, 0.0])
        pos = np.array([0.0, 1.0, 0.0])
        neg = np.array([0.0, 0.0, 1.0])
        loss, *_ = info_nce_loss(u_a, pos, neg[None, :], tau=1.0)
        assert abs(loss) < 1e-12

    def test_paper_literal_admits_negative_loss(self):
        u_a = np.array([1.0, 0.0])
        pos = np.array([1.0, 0.0])
        neg = np.array([0.0, 1.0])
        loss, *_ = info_nce_loss(u_a, pos, neg[None, :], tau=1.0)
        assert abs(loss - (-1.0)) < 1e-12

    def test_standard_form_is_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            c = int(rng.integers(2, 8))
            k = int(rng.integers(1, 6))
            loss, *_ = info_nce_loss(
                unit(rng.normal(0, 1, c)),
                unit(rng.normal(0, 1, c)),
                rand_units(rng, k, c),
                tau=float(rng.uniform(0.1, 2.0)),
                include_positive_in_denominator=True,
            )
            assert loss >= 0

    def test_paper_literal_lower_bound(self):
        # with unit inputs, loss >= -max_similarity/tau >= -1/tau
        rng = np.random.default_rng(1)
        for _ in range(200):
            tau = float(rng.uniform(0.2, 2.0))
            loss, *_ = info_nce_loss(
                unit(rng.normal(0, 1, 5)),
                unit(rng.normal(0, 1, 5)),
                rand_units(rng, 3, 5),
                tau=tau,
            )
            assert loss >= -1.0 / tau - 1e-12

    @pytest.mark.parametrize("include", [False, True])
    def test_gradients_match_finite_differences(self, include):
        rng = np.random.default_rng(2)
        c, k, tau = 5, 3, 0.7
        u_a, pos = unit(rng.normal(0, 1, c)), unit(rng.normal(0, 1, c))
        negs = rand_units(rng, k, c)
        _, d_ua, d_pos, d_negs = info_nce_loss(u_a, pos, negs, tau, include)
        h = 1e-6

        def loss_at(ua_, pos_, negs_):
            return info_nce_loss(ua_, pos_, negs_, tau, include)[0]

        for arr, grad in ((u_a, d_ua), (pos, d_pos)):
            for j in range(c):
                ap, am = arr.copy(), arr.copy()
                ap[j] += h
                am[j] -= h
                if arr is u_a:
                    fd = (loss_at(ap, pos, negs) - loss_at(am, pos, negs)) / (2 * h)
                else:
                    fd = (loss_at(u_a, ap, negs) - loss_at(u_a, am, negs)) / (2 * h)
                assert abs(fd - grad[j]) < 1e-6
        for i in range(k):
            for j in range(c):
                np_, nm = negs.copy(), negs.copy()
                np_[i, j] += h
                nm[i, j] -= h
                fd = (loss_at(u_a, pos, np_) - loss_at(u_a, pos, nm)) / (2 * h)
                assert abs(fd - d_negs[i, j]) < 1e-6

    def test_validation(self):
        u = np.array([1.0, 0.0])
        with pytest.raises(ValueError):
            info_nce_loss(u, u, u[None, :], tau=0.0)
        with pytest.raises(ValueError):
            info_nce_loss(u, u, np.empty((0, 2)), tau=1.0)


class TestMomentumUpdate:
    def test_m_one_is_bitwise_fixed_point(self):
        a, b = enc.init_params(0, (3, 4, 4)), enc.init_params(1, (3, 4, 4))
        out = momentum_update(a, b, 1.0)
        assert np.array_equal(out.flat, a.flat)

    def test_m_zero_is_bitwise_copy(self):
        a, b = enc.init_params(2, (3, 4, 4)), enc.init_params(3, (3, 4, 4))
        out = momentum_update(a, b, 0.0)
        assert np.array_equal(out.flat, b.flat)

    def test_arithmetic_case(self):
        layout = enc.make_layout((3, 4, 4))
        theta_pn = enc.EncoderParams(layout=layout, flat=np.zeros(layout.total_size))
        theta_a = enc.EncoderParams(layout=layout, flat=np.ones(layout.total_size))
        out = momentum_update(theta_pn, theta_a, 0.999)
        assert np.abs(out.flat - 0.001).max() <= 1e-15

    def test_source_untouched(self):
        a, b = enc.init_params(4, (3, 4, 4)), enc.init_params(5, (3, 4, 4))
        b_before = b.flat.copy()
        momentum_update(a, b, 0.5)
        assert np.array_equal(b.flat, b_before)

    def test_validation(self):
        a = enc.init_params(6, (3, 4, 4))
        b = enc.init_params(7, (3, 4, 8))
        with pytest.raises(LayoutMismatchError):
            momentum_update(a, b, 0.5)
        with pytest.raises(ValueError):
            momentum_update(a, a, 1.5)


class TestMomentumQueue:
    def test_fifo_eviction_keeps_last_in_order(self):
        q = MomentumQueue(capacity=4, dim=3)
        vecs = np.eye(3)
        rows = [unit([1, i + 1, 0.5]) for i in range(6)]
        for r in rows:
            q.push(r)
        got = q.contents()
        assert got.shape == (4, 3)
        assert np.allclose(got, np.array(rows[2:]), atol=0)

    def test_batch_push_capacity_law(self):
        rng = np.random.default_rng(3)
        q = MomentumQueue(capacity=10, dim=4)
        q.push(rand_units(rng, 7, 4))
        assert q.size == 7
        q.push(rand_units(rng, 7, 4))
        assert q.size == 10

    def test_sample_without_replacement(self):
        rng = np.random.default_rng(4)
        q = MomentumQueue(capacity=8, dim=4)
        stored = rand_units(rng, 3, 4)
        q.push(stored)
        got = q.sample(2, np.random.default_rng(0))
        assert got.shape == (2, 4)
        assert not np.array_equal(got[0], got[1])
        rows = {tuple(r) for r in stored}
        assert all(tuple(r) in rows for r in got)

    def test_rejects_non_unit(self):
        q = MomentumQueue(capacity=2, dim=3)
        with pytest.raises(ValueError, match="unit-norm"):
            q.push(np.array([1.0, 1.0, 0.0]))

    def test_sample_more_than_size(self):
        q = MomentumQueue(capacity=4, dim=3)
        q.push(np.array([1.0, 0.0, 0.0]))
        with pytest.raises(ValueError):
            q.sample(2, np.random.default_rng(0))


def tiny_clouds(rng, count=10, n=12):
    return [PointCloud(rng.normal(0, 0.5, (n, 3))) for _ in range(count)]


def tiny_config(**kw):
    base = dict(
        momentum_m=0.99,
        queue_capacity=16,
        temperature=0.5,
        batch_size=4,
        learning_rate=0.01,
        epochs=2,
        num_negatives=4,
        augmentation=AugmentationConfig(),
    )
    base.update(kw)
    return PretrainConfig(**base)


class TestPretrainEpoch:
    def test_no_gradient_leaks_into_momentum_encoder(self):
        # m = 1: the momentum encoder must stay bit-identical no matter how
        # many optimizer steps the anchor encoder takes
        rng = np.random.default_rng(5)
        clouds = tiny_clouds(rng)
        cfg = tiny_config(momentum_m=1.0, epochs=3)
        anchor = enc.init_params(0, (3, 6, 5))
        momentum = anchor.copy()
        momentum_before = momentum.flat.copy()
        queue = MomentumQueue(cfg.queue_capacity, 5)
        opt = enc.make_optimizer_state(anchor.flat.size, cfg.learning_rate)
        gen = np.random.default_rng(1)
        for epoch in range(3):
            anchor, momentum, queue, opt, _ = pretrain_epoch(
                anchor, momentum, queue, clouds, cfg, gen, opt, epoch=epoch
            )
        assert np.array_equal(momentum.flat, momentum_before)
        assert not np.array_equal(anchor.flat, momentum_before)  # anchor did train

    def test_m1_lr0_everything_constant(self):
        rng = np.random.default_rng(6)
        clouds = tiny_clouds(rng)
        cfg = tiny_config(momentum_m=1.0, learning_rate=0.0)
        anchor = enc.init_params(1, (3, 6, 5))
        momentum = anchor.copy()
        a0, m0 = anchor.flat.copy(), momentum.flat.copy()
        queue = MomentumQueue(cfg.queue_capacity, 5)
        opt = enc.make_optimizer_state(anchor.flat.size, 0.0)
        anchor, momentum, queue, opt, _ = pretrain_epoch(
            anchor, momentum, queue, clouds, cfg, np.random.default_rng(2), opt
        )
        assert np.array_equal(anchor.flat, a0)
        assert np.array_equal(momentum.flat, m0)

    def test_defer_policy_first_loss_at_second_batch(self):
        # queue empty, num_negatives == batch size: batch 1 only feeds the
        # queue, batch 2 computes the first loss from batch-1 pushes
        rng = np.random.default_rng(7)
        clouds = tiny_clouds(rng, count=8)
        cfg = tiny_config(batch_size=4, num_negatives=4, queue_capacity=16, epochs=1)
        anchor = enc.init_params(2, (3, 6, 5))
        queue = MomentumQueue(cfg.queue_capacity, 5)
        opt = enc.make_optimizer_state(anchor.flat.size, cfg.learning_rate)
        _, _, queue, _, stats = pretrain_epoch(
            anchor, anchor.copy(), queue, clouds, cfg, np.random.default_rng(3), opt, epoch=1
        )
        assert stats.batches == 2
        assert stats.batches_with_loss == 1
        assert queue.size == 8

    def test_queue_vectors_stay_unit_and_bounded(self):
        rng = np.random.default_rng(8)
        clouds = tiny_clouds(rng, count=12)
        cfg = tiny_config(queue_capacity=8, num_negatives=4, epochs=2)
        anchor = enc.init_params(3, (3, 6, 5))
        queue = MomentumQueue(8, 5)
        opt = enc.make_optimizer_state(anchor.flat.size, cfg.learning_rate)
        momentum = anchor.copy()
        gen = np.random.default_rng(4)
        for epoch in range(2):
            anchor, momentum, queue, opt, _ = pretrain_epoch(
                anchor, momentum, queue, clouds, cfg, gen, opt, epoch=epoch
            )
        assert queue.size <= 8
        norms = np.linalg.norm(queue.contents(), axis=1)
        assert np.abs(norms - 1).max() <= 1e-6

    def test_run_pretraining_deterministic(self):
        rng = np.random.default_rng(9)
        clouds = tiny_clouds(rng, count=8)
        cfg = tiny_config(epochs=2)
        a1, m1, s1 = run_pretraining(clouds, cfg, seed=11, widths=(3, 6, 5))
        a2, m2, s2 = run_pretraining(clouds, cfg, seed=11, widths=(3, 6, 5))
        assert np.array_equal(a1.flat, a2.flat)
        assert np.array_equal(m1.flat, m2.flat)
        assert [s.mean_loss for s in s1] == [s.mean_loss for s in s2]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            tiny_config(momentum_m=1.5)
        with pytest.raises(ValueError):
            tiny_config(temperature=0.0)
        with pytest.raises(ValueError):
            tiny_config(num_negatives=64, queue_capacity=32)
