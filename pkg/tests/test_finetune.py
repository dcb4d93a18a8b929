"""Triplet loss, batch-hard mining, and the finetuning loop."""

import numpy as np
import pytest

from gidp import encoder as enc
from gidp.dataset import SyntheticWorldConfig, build_index, generate_synthetic_world
from gidp.finetune import (
    FinetuneConfig,
    batch_hard_mining,
    finetune_epoch,
    lr_for_epoch,
    run_finetuning,
    triplet_loss,
)


def unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x)


class TestTripletLoss:
    def test_equal_distances_give_margin(self):
        v_a = np.array([0.0, 0.0])
        v_p = np.array([1.0, 0.0])
        v_n = np.array([0.0, 1.0])
        loss, _ = triplet_loss(v_a, v_p, v_n, margin=0.2)
        assert abs(loss - 0.2) < 1e-12

    def test_inactive_hinge_zero_loss_zero_gradient(self):
        v_a = np.array([0.0, 0.0])
        v_p = np.array([0.5, 0.0])
        v_n = np.array([0.9, 0.0])
        loss, (da, dp, dn) = triplet_loss(v_a, v_p, v_n, margin=0.2)
        assert loss == 0.0
        assert np.all(da == 0) and np.all(dp == 0) and np.all(dn == 0)

    def test_active_arithmetic(self):
        v_a = np.array([0.0, 0.0])
        v_p = np.array([1.0, 0.0])
        v_n = np.array([0.2, 0.0])
        loss, _ = triplet_loss(v_a, v_p, v_n, margin=0.2)
        assert abs(loss - 1.0) < 1e-12

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        h = 1e-6
        checked = 0
        while checked < 50:
            v_a, v_p, v_n = (rng.normal(0, 1, 4) for _ in range(3))
            d_p = np.linalg.norm(v_a - v_p)
            d_n = np.linalg.norm(v_a - v_n)
            if abs(d_p - d_n + 0.3) < 1e-2:  # stay off the hinge kink
                continue
            loss, (da, dp, dn) = triplet_loss(v_a, v_p, v_n, margin=0.3)
            for vec, grad, which in ((v_a, da, 0), (v_p, dp, 1), (v_n, dn, 2)):
                for j in range(4):
                    args = [v_a.copy(), v_p.copy(), v_n.copy()]
                    args[which][j] += h
                    up = triplet_loss(*args, margin=0.3)[0]
                    args[which][j] -= 2 * h
                    dn_ = triplet_loss(*args, margin=0.3)[0]
                    assert abs((up - dn_) / (2 * h) - grad[j]) < 1e-6
            checked += 1

    def test_kink_chooses_zero_side(self):
        # powers of two keep d_p - d_n + margin at exactly 0.0
        v_a = np.array([0.0, 0.0])
        v_p = np.array([0.5, 0.0])
        v_n = np.array([0.75, 0.0])
        loss, (da, dp, dn) = triplet_loss(v_a, v_p, v_n, margin=0.25)
        assert loss == 0.0
        assert np.all(da == 0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            triplet_loss(np.zeros(3), np.zeros(4), np.zeros(3), 0.2)


class TestBatchHardMining:
    def test_farthest_positive(self):
        anchor = np.zeros(2)
        pos = np.array([[0.2, 0.0], [0.7, 0.0]])
        neg = np.array([[5.0, 0.0]])
        assert batch_hard_mining(anchor, pos, neg)[0] == 1

    def test_nearest_negative(self):
        anchor = np.zeros(2)
        pos = np.array([[1.0, 0.0]])
        neg = np.array([[1.4, 0.0], [0.3, 0.0], [0.9, 0.0]])
        assert batch_hard_mining(anchor, pos, neg)[1] == 1

    def test_tie_breaks_to_lowest_index(self):
        anchor = np.zeros(2)
        cands = np.array([[0.5, 0.0], [0.0, 0.5]])
        hard_p, hard_n = batch_hard_mining(anchor, cands, cands)
        assert hard_p == 0 and hard_n == 0

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            c = int(rng.integers(2, 6))
            anchor = rng.normal(0, 1, c)
            pos = rng.normal(0, 1, (int(rng.integers(1, 7)), c))
            neg = rng.normal(0, 1, (int(rng.integers(1, 7)), c))
            hard_p, hard_n = batch_hard_mining(anchor, pos, neg)
            d_pos = [float(np.linalg.norm(p - anchor)) for p in pos]
            d_neg = [float(np.linalg.norm(n - anchor)) for n in neg]
            best_p = max(range(len(d_pos)), key=lambda i: (d_pos[i], -i))
            best_n = min(range(len(d_neg)), key=lambda i: (d_neg[i], i))
            assert (hard_p, hard_n) == (best_p, best_n)

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError):
            batch_hard_mining(np.zeros(2), np.empty((0, 2)), np.ones((1, 2)))


class TestLrSchedule:
    def test_decay_boundary(self):
        cfg = FinetuneConfig(learning_rate=1e-3, lr_decay_factor=10.0, lr_decay_epoch=30)
        assert lr_for_epoch(cfg, 30) == 1e-3
        assert lr_for_epoch(cfg, 31) == 1e-4


def small_world(seed=0):
    cfg = SyntheticWorldConfig(
        num_sites=5, submaps_per_site=3, site_spacing=100, points_per_cloud=48, geometry_seed=seed
    )
    return build_index(generate_synthetic_world(cfg))


class TestFinetuneEpoch:
    def test_zero_lr_keeps_params(self):
        index = small_world()
        cfg = FinetuneConfig(batch_size=4, epochs=1, learning_rate=0.0)
        params = enc.init_params(0, (3, 6, 5))
        opt = enc.make_optimizer_state(params.flat.size, 0.0)
        out, _, _ = finetune_epoch(params, index, cfg, np.random.default_rng(0), opt)
        assert np.array_equal(out.flat, params.flat)

    def test_deterministic_trajectory(self):
        index = small_world(1)
        cfg = FinetuneConfig(batch_size=4, epochs=3, learning_rate=1e-3)
        p1, s1 = run_finetuning(index, cfg, seed=5, widths=(3, 6, 5))
        p2, s2 = run_finetuning(index, cfg, seed=5, widths=(3, 6, 5))
        assert np.array_equal(p1.flat, p2.flat)
        assert [s.mean_loss for s in s1] == [s.mean_loss for s in s2]

    def test_anchor_without_positives_skipped(self, caplog):
        # a lone faraway record has positives() empty and must be skipped
        import logging

        from gidp.dataset import PointCloud, SubmapRecord

        rng = np.random.default_rng(2)
        records = [
            SubmapRecord(id=0, cloud=PointCloud(rng.normal(0, 1, (8, 3))), coord=np.array([0.0, 0])),
            SubmapRecord(id=1, cloud=PointCloud(rng.normal(0, 1, (8, 3))), coord=np.array([5.0, 0])),
            SubmapRecord(id=2, cloud=PointCloud(rng.normal(0, 1, (8, 3))), coord=np.array([500.0, 0])),
        ]
        index = build_index(records)
        cfg = FinetuneConfig(batch_size=2, epochs=1, learning_rate=1e-3, num_neg_candidates=1)
        params = enc.init_params(1, (3, 6, 5))
        opt = enc.make_optimizer_state(params.flat.size, 1e-3)
        with caplog.at_level(logging.WARNING):
            _, _, stats = finetune_epoch(params, index, cfg, np.random.default_rng(0), opt)
        assert stats.num_anchors == 2
        assert any("no positives" in rec.message for rec in caplog.records)

    def test_directional_learning_on_synthetic_world(self):
        # intra-site descriptor distances shrink and inter-site distances grow
        # over training for most seeds
        from gidp.pipeline import embed_records

        wins = 0
        for seed in range(5):
            cfg_w = SyntheticWorldConfig(
                num_sites=6, submaps_per_site=3, site_spacing=100, points_per_cloud=64, geometry_seed=seed
            )
            records = generate_synthetic_world(cfg_w)
            index = build_index(records)
            params0 = enc.init_params(seed, (3, 16, 24))
            cfg = FinetuneConfig(batch_size=6, epochs=20, learning_rate=2e-3, num_neg_candidates=4)
            trained, _ = run_finetuning(index, cfg, seed=seed, init=params0)

            def gap(params):
                descs = enc.encode(params, [r.cloud for r in records])
                intra, inter = [], []
                for i in range(len(records)):
                    for j in range(i + 1, len(records)):
                        d = np.linalg.norm(descs[i] - descs[j])
                        (intra if records[i].id // 3 == records[j].id // 3 else inter).append(d)
                return np.mean(intra), np.mean(inter)

            intra0, inter0 = gap(params0)
            intra1, inter1 = gap(trained)
            if intra1 < intra0 and inter1 > inter0:
                wins += 1
        assert wins >= 4

    def test_stats_active_fraction_in_range(self):
        index = small_world(3)
        cfg = FinetuneConfig(batch_size=4, epochs=1, learning_rate=1e-3)
        params = enc.init_params(2, (3, 6, 5))
        opt = enc.make_optimizer_state(params.flat.size, 1e-3)
        _, _, stats = finetune_epoch(params, index, cfg, np.random.default_rng(1), opt)
        assert 0.0 <= stats.active_fraction <= 1.0
        assert stats.mean_loss >= 0.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FinetuneConfig(margin=0.0)
        with pytest.raises(ValueError):
            FinetuneConfig(lr_decay_factor=0.0)
