"""Unsupervised momentum-contrast pretraining.

Two encoders share one architecture: the anchor encoder is trained by
backpropagation, the momentum encoder follows it as an exponential moving
average and is never touched by gradients. Positives are augmented copies of
the anchors; negatives are past momentum-encoder outputs held in a FIFO queue,
which decouples the number of negatives from the batch size.

The contrastive loss is, by default, the literal form

    L = -log( exp(u_a . u_pos) / sum_k exp(u_a . u_nk) )

with every dot product divided by a temperature (tau = 1 reproduces the form
exactly; note it can go negative because the positive term is absent from the
denominator). ``include_positive_in_denominator`` switches to the standard
nonnegative variant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .errors import LayoutMismatchError
from .pointcloud import AugmentationConfig, PointCloud, compose_augmentations

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-6


@dataclass
class PretrainConfig:
    momentum_m: float = 0.999
    queue_capacity: int = 2048
    temperature: float = 1.0
    batch_size: int = 64
    learning_rate: float = 0.03
    epochs: int = 12
    num_negatives: int = 256
    include_positive_in_denominator: bool = False
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if not 0 <= self.momentum_m <= 1:
            raise ValueError("momentum_m must be in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.num_negatives < 1 or self.num_negatives > self.queue_capacity:
            raise ValueError("num_negatives must be in [1, queue_capacity]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class PretrainEpochStats:
    epoch: int
    mean_loss: float  # nan while the queue is still warming up
    queue_size: int
    mean_pos_sim: float
    batches: int
    batches_with_loss: int


class MomentumQueue:
    """Fixed-capacity FIFO of unit-norm descriptors used as negatives."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._buffer = np.zeros((capacity, dim))
        self._head = 0  # next slot to write
        self._size = 0

    @property
    def size(self) -> int:
        return self._size

    def push(self, descriptors: np.ndarray) -> None:
        """Append rows FIFO, evicting the oldest past capacity.

        Rows must be unit-norm within 1e-6.
        """
        descriptors = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
        if descriptors.shape[1] != self.dim:
            raise ValueError(f"descriptor dim {descriptors.shape[1]} != queue dim {self.dim}")
        norms = np.sqrt((descriptors ** 2).sum(axis=1))
        if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
            raise ValueError("queue only stores unit-norm descriptors (tolerance 1e-6)")
        for row in descriptors:
            self._buffer[self._head] = row
            self._head = (self._head + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def contents(self) -> np.ndarray:
        """Stored descriptors, oldest first."""
        if self._size < self.capacity:
            return self._buffer[: self._size].copy()
        order = (self._head + np.arange(self.capacity)) % self.capacity
        return self._buffer[order].copy()

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """Draw k distinct stored descriptors uniformly."""
        if k < 1 or k > self._size:
            raise ValueError(f"cannot sample {k} negatives from a queue of size {self._size}")
        start = (self._head - self._size) % self.capacity
        logical = rng.choice(self._size, size=k, replace=False)
        return self._buffer[(start + logical) % self.capacity].copy()


# ---------------------------------------------------------------------------
# losses and the momentum rule
# ---------------------------------------------------------------------------

def infonce_terms(
    u: np.ndarray,
    u_pos: np.ndarray,
    negatives: np.ndarray,
    tau: float,
    include_positive: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-anchor InfoNCE values and gradients, vectorized over a batch.

    Args:
        u: (B, C) anchor descriptors; u_pos: (B, C); negatives: (B, K, C).

    Returns:
        (losses (B,), d_u (B, C), d_u_pos (B, C), d_negatives (B, K, C)).
    """
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    if negatives.ndim != 3 or negatives.shape[1] < 1:
        raise ValueError("at least one negative is required")
    sp = (u * u_pos).sum(axis=1) / tau
    sn = np.einsum("bc,bkc->bk", u, negatives) / tau
    if include_positive:
        logits = np.concatenate([sp[:, None], sn], axis=1)
        m = logits.max(axis=1)
        lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
        sig = np.exp(logits - lse[:, None])
        losses = lse - sp
        d_u = ((sig[:, :1] - 1.0) * u_pos + np.einsum("bk,bkc->bc", sig[:, 1:], negatives)) / tau
        d_u_pos = (sig[:, :1] - 1.0) * u / tau
        d_neg = sig[:, 1:, None] * u[:, None, :] / tau
    else:
        m = sn.max(axis=1)
        lse = m + np.log(np.exp(sn - m[:, None]).sum(axis=1))
        sig = np.exp(sn - lse[:, None])
        losses = lse - sp
        d_u = (-u_pos + np.einsum("bk,bkc->bc", sig, negatives)) / tau
        d_u_pos = -u / tau
        d_neg = sig[:, :, None] * u[:, None, :] / tau
    return losses, d_u, d_u_pos, d_neg


def info_nce_loss(
    u_a: np.ndarray,
    u_pos: np.ndarray,
    negatives: np.ndarray,
    tau: float = 1.0,
    include_positive_in_denominator: bool = False,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """InfoNCE for one anchor against K negatives.

    Returns:
        (loss, dloss/du_a, dloss/du_pos, dloss/dnegatives).
    """
    u_a = np.asarray(u_a, dtype=np.float64)
    u_pos = np.asarray(u_pos, dtype=np.float64)
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    losses, d_u, d_up, d_neg = infonce_terms(
        u_a[None, :], u_pos[None, :], negatives[None, :, :], tau, include_positive_in_denominator
    )
    return float(losses[0]), d_u[0], d_up[0], d_neg[0]


def momentum_update(theta_pn: enc.EncoderParams, theta_a: enc.EncoderParams, m: float) -> enc.EncoderParams:
    """theta_pn <- m * theta_pn + (1 - m) * theta_a, elementwise over the flat vector.

    m = 1 and m = 0 are handled as exact copies so the fixed-point and
    copy laws hold bit-for-bit.
    """
    if theta_pn.layout != theta_a.layout:
        raise LayoutMismatchError("momentum update requires identical parameter layouts")
    if not 0 <= m <= 1:
        raise ValueError("momentum coefficient must be in [0, 1]")
    if m == 1.0:
        return theta_pn.copy()
    if m == 0.0:
        return theta_a.copy()
    return enc.EncoderParams(layout=theta_pn.layout, flat=m * theta_pn.flat + (1 - m) * theta_a.flat)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def pretrain_epoch(
    anchor_params: enc.EncoderParams,
    momentum_params: enc.EncoderParams,
    queue: MomentumQueue,
    clouds: list[PointCloud],
    cfg: PretrainConfig,
    rng: np.random.Generator,
    optstate: enc.OptimizerState,
    epoch: int = 0,
) -> tuple[enc.EncoderParams, enc.EncoderParams, MomentumQueue, enc.OptimizerState, PretrainEpochStats]:
    """One pass over the dataset.

    Per batch: augment a positive per anchor, project both sides, draw
    negatives from the queue, take an optimizer step on the anchor encoder
    only, momentum-update the second encoder, then push the positives' (u_pos)
    descriptors into the queue. While the queue holds fewer than
    ``num_negatives`` entries the loss is deferred: the batch only feeds the
    queue ("defer" warm-start policy).
    """
    order = rng.permutation(len(clouds))
    losses = []
    pos_sims = []
    n_batches = 0
    for start in range(0, len(order), cfg.batch_size):
        n_batches += 1
        batch = [clouds[i] for i in order[start : start + cfg.batch_size]]
        positives = [compose_augmentations(pc, cfg.augmentation, rng) for pc in batch]
        u_pos = enc.encode(momentum_params, positives, project=True)
        u_anchor = enc.encode(anchor_params, batch, project=True)
        pos_sims.append(float((u_anchor * u_pos).sum(axis=1).mean()))
        if queue.size >= cfg.num_negatives:
            items = [
                (pc, u_pos[i], queue.sample(cfg.num_negatives, rng))
                for i, pc in enumerate(batch)
            ]
            try:
                loss, grads = enc.backward(
                    anchor_params,
                    items,
                    "infonce",
                    tau=cfg.temperature,
                    include_positive=cfg.include_positive_in_denominator,
                )
            except ValueError as exc:
                raise ValueError(f"epoch aborted at batch {n_batches}: {exc}") from exc
            anchor_params, optstate = enc.optimizer_step(anchor_params, grads, optstate)
            momentum_params = momentum_update(momentum_params, anchor_params, cfg.momentum_m)
            losses.append(loss)
        queue.push(u_pos)
    stats = PretrainEpochStats(
        epoch=epoch,
        mean_loss=float(np.mean(losses)) if losses else float("nan"),
        queue_size=queue.size,
        mean_pos_sim=float(np.mean(pos_sims)) if pos_sims else float("nan"),
        batches=n_batches,
        batches_with_loss=len(losses),
    )
    return anchor_params, momentum_params, queue, optstate, stats


def run_pretraining(
    clouds: list[PointCloud],
    cfg: PretrainConfig,
    seed: int,
    widths: tuple[int, ...] = enc.DEFAULT_WIDTHS,
    init: enc.EncoderParams | None = None,
) -> tuple[enc.EncoderParams, enc.EncoderParams, list[PretrainEpochStats]]:
    """Full pretraining run; both encoders start identical.

    Returns:
        (anchor encoder params, momentum encoder params, per-epoch stats).
    """
    anchor = init.copy() if init is not None else enc.init_params(seed, widths)
    momentum = anchor.copy()
    queue = MomentumQueue(cfg.queue_capacity, anchor.descriptor_dim)
    optstate = enc.make_optimizer_state(anchor.layout.total_size, cfg.learning_rate)
    rng = np.random.default_rng([seed, 0x9E71])
    stats: list[PretrainEpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        anchor, momentum, queue, optstate, epoch_stats = pretrain_epoch(
            anchor, momentum, queue, clouds, cfg, rng, optstate, epoch=epoch
        )
        stats.append(epoch_stats)
        log.info(
            "pretrain epoch %d: mean_loss=%.6g queue=%d pos_sim=%.4f",
            epoch,
            epoch_stats.mean_loss,
            epoch_stats.queue_size,
            epoch_stats.mean_pos_sim,
        )
    return anchor, momentum, stats


def format_stats(stats: list[PretrainEpochStats]) -> str:
    """Line-delimited records: epoch, mean_loss, queue_size."""
    return "".join(f"{s.epoch} {s.mean_loss!r} {s.queue_size}\n" for s in stats)
