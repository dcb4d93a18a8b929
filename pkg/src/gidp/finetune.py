"""Supervised triplet finetuning with batch-hard mining.

Each batch holds a set of anchors with sampled positive/negative candidates
(respecting the 10 m / 50 m index relations). Per anchor, the farthest
positive and nearest negative in descriptor space are selected, and the hinge

    max( d(v_a, v_p) - d(v_a, v_n) + margin, 0 )

is averaged over the active triplets. Gradients treat the hard selection as
fixed for the step (the selection is recomputed every step); at the hinge kink
the zero side is chosen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import encoder as enc
from .dataset import DatasetIndex, NoPositivesError, sample_training_tuple
from .pointcloud import PointCloud

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    margin: float = 0.2
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 8
    lr_decay_factor: float = 10.0
    lr_decay_epoch: int = 30
    num_pos_candidates: int = 2
    num_neg_candidates: int = 8

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.lr_decay_factor <= 0 or self.lr_decay_epoch < 1:
            raise ValueError("lr decay schedule must have factor > 0 and epoch >= 1")
        if self.num_pos_candidates < 1 or self.num_neg_candidates < 1:
            raise ValueError("candidate counts must be >= 1")


@dataclass
class FinetuneEpochStats:
    epoch: int
    mean_loss: float
    active_fraction: float
    num_anchors: int


def triplet_loss(
    v_a: np.ndarray, v_p: np.ndarray, v_n: np.ndarray, margin: float
) -> tuple[float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Hinge triplet loss with Euclidean distances and its subgradient.

    Returns:
        (loss, (d/dv_a, d/dv_p, d/dv_n)); gradients are zero when the hinge
        is inactive (including exactly at the kink) and the distance
        subgradient at coincident descriptors is taken as zero.
    """
    v_a = np.asarray(v_a, dtype=np.float64)
    v_p = np.asarray(v_p, dtype=np.float64)
    v_n = np.asarray(v_n, dtype=np.float64)
    if not (v_a.shape == v_p.shape == v_n.shape):
        raise ValueError("descriptor dimensions must match")
    if margin <= 0:
        raise ValueError("margin must be > 0")
    diff_p = v_a - v_p
    diff_n = v_a - v_n
    d_p = float(np.sqrt((diff_p ** 2).sum()))
    d_n = float(np.sqrt((diff_n ** 2).sum()))
    value = d_p - d_n + margin
    zero = np.zeros_like(v_a)
    if value <= 0:
        return 0.0, (zero, zero.copy(), zero.copy())
    unit_p = diff_p / d_p if d_p > 0 else zero
    unit_n = diff_n / d_n if d_n > 0 else zero
    return value, (unit_p - unit_n, -unit_p, unit_n.copy())


def batch_hard_mining(
    anchor_desc: np.ndarray, pos_descs: np.ndarray, neg_descs: np.ndarray
) -> tuple[int, int]:
    """Select the hardest candidates for one anchor.

    Returns:
        (index of the farthest positive, index of the nearest negative);
        ties break toward the lowest index.
    """
    pos_descs = np.atleast_2d(pos_descs)
    neg_descs = np.atleast_2d(neg_descs)
    if pos_descs.shape[0] < 1 or neg_descs.shape[0] < 1:
        raise ValueError("mining needs at least one candidate of each kind")
    d_pos = np.sqrt(((pos_descs - anchor_desc) ** 2).sum(axis=1))
    d_neg = np.sqrt(((neg_descs - anchor_desc) ** 2).sum(axis=1))
    return int(np.argmax(d_pos)), int(np.argmin(d_neg))


def lr_for_epoch(cfg: FinetuneConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch: decayed after lr_decay_epoch ends."""
    if epoch > cfg.lr_decay_epoch:
        return cfg.learning_rate / cfg.lr_decay_factor
    return cfg.learning_rate


def finetune_epoch(
    params: enc.EncoderParams,
    index: DatasetIndex,
    cfg: FinetuneConfig,
    rng: np.random.Generator,
    optstate: enc.OptimizerState,
    epoch: int = 0,
) -> tuple[enc.EncoderParams, enc.OptimizerState, FinetuneEpochStats]:
    """One pass of batch-hard triplet training over all usable anchors.

    Anchors without positives (or without any valid negative) are skipped with
    a diagnostic. Candidates and anchors are re-encoded with the current
    parameters every batch before mining.
    """
    n_records = len(index.records)
    anchors = []
    for rec in index.records:
        if not index.positives[rec.id]:
            log.warning("anchor %d skipped: no positives within %.1f m", rec.id, index.pos_threshold)
            continue
        if len(index.non_negatives[rec.id]) >= n_records:
            log.warning("anchor %d skipped: no negatives beyond %.1f m", rec.id, index.neg_threshold)
            continue
        anchors.append(rec.id)
    if not anchors:
        raise ValueError("no anchor has both positives and negatives; cannot finetune")

    order = rng.permutation(len(anchors))
    batch_losses = []
    hinges_all = []
    for start in range(0, len(order), cfg.batch_size):
        batch_ids = [anchors[i] for i in order[start : start + cfg.batch_size]]
        tuples = []
        for anchor_id in batch_ids:
            try:
                tuples.append(
                    sample_training_tuple(
                        index, anchor_id, cfg.num_pos_candidates, cfg.num_neg_candidates, rng
                    )
                )
            except NoPositivesError as exc:  # guarded above; keep the loop alive regardless
                log.warning("%s", exc)
        if not tuples:
            continue
        clouds: list[PointCloud] = []
        spans = []  # (anchor slot, positive slice, negative slice)
        for anchor_id, pos_ids, neg_ids in tuples:
            a0 = len(clouds)
            clouds.append(index.by_id[anchor_id].cloud)
            p0 = len(clouds)
            clouds.extend(index.by_id[i].cloud for i in pos_ids)
            n0 = len(clouds)
            clouds.extend(index.by_id[i].cloud for i in neg_ids)
            spans.append((a0, slice(p0, n0), slice(n0, len(clouds))))
        descs = enc.encode(params, clouds)
        triplets = []
        for (a0, p_sl, n_sl), (anchor_id, pos_ids, neg_ids) in zip(spans, tuples):
            hard_p, hard_n = batch_hard_mining(descs[a0], descs[p_sl], descs[n_sl])
            d_p = float(np.sqrt(((descs[p_sl][hard_p] - descs[a0]) ** 2).sum()))
            d_n = float(np.sqrt(((descs[n_sl][hard_n] - descs[a0]) ** 2).sum()))
            hinges_all.append(max(d_p - d_n + cfg.margin, 0.0))
            triplets.append(
                (
                    index.by_id[anchor_id].cloud,
                    index.by_id[pos_ids[hard_p]].cloud,
                    index.by_id[neg_ids[hard_n]].cloud,
                )
            )
        loss, grads = enc.backward(params, triplets, "triplet", margin=cfg.margin)
        params, optstate = enc.optimizer_step(params, grads, optstate)
        batch_losses.append(loss)

    active = sum(1 for h in hinges_all if h > 0)
    if hinges_all and active == 0:
        log.warning("epoch %d: zero active triplets (training collapsed or converged)", epoch)
    stats = FinetuneEpochStats(
        epoch=epoch,
        mean_loss=float(np.mean(batch_losses)) if batch_losses else 0.0,
        active_fraction=active / len(hinges_all) if hinges_all else 0.0,
        num_anchors=len(anchors),
    )
    return params, optstate, stats


def run_finetuning(
    index: DatasetIndex,
    cfg: FinetuneConfig,
    seed: int,
    init: enc.EncoderParams | None = None,
    widths: tuple[int, ...] = enc.DEFAULT_WIDTHS,
) -> tuple[enc.EncoderParams, list[FinetuneEpochStats]]:
    """Full finetuning run from pretrained weights or random init."""
    params = init.copy() if init is not None else enc.init_params(seed, widths)
    optstate = enc.make_optimizer_state(params.layout.total_size, cfg.learning_rate)
    rng = np.random.default_rng([seed, 0xF17E])
    stats: list[FinetuneEpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        optstate = replace(optstate, lr=lr_for_epoch(cfg, epoch))
        params, optstate, epoch_stats = finetune_epoch(params, index, cfg, rng, optstate, epoch=epoch)
        stats.append(epoch_stats)
        log.info(
            "finetune epoch %d: mean_loss=%.6g active=%.2f lr=%g",
            epoch,
            epoch_stats.mean_loss,
            epoch_stats.active_fraction,
            optstate.lr,
        )
    return params, stats


def format_stats(stats: list[FinetuneEpochStats]) -> str:
    """Line-delimited records: epoch, mean_loss, active_fraction."""
    return "".join(f"{s.epoch} {s.mean_loss!r} {s.active_fraction!r}\n" for s in stats)
