"""Self-supervised pretraining: cross-modality consistency against momentum
queues, masked cross-reconstruction through the unified decoder, and
instance-level alignment of global embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import NBI, WLI, PairedSample, DatasetSplits
from .networks import Model, NetConfig, build_model
from .optim import AdamW, cosine_lr

_ORDER_STREAM = 201
_MASK_STREAM = 202


class PretrainError(ValueError):
    """Raised for invalid pretraining inputs or configuration."""


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    learning_rate_min: float = 1e-5
    weight_decay: float = 0.02
    momentum: float = 0.995
    temperature: float = 0.07
    target_mix: float = 0.4
    mask_ratio: float = 0.75
    queue_size: int = 1024
    consistency_weight: float = 1.0
    reconstruction_weight: float = 1.0
    alignment_weight: float = 1.0
    reconstruct_masked_only: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.queue_size < 1:
            raise PretrainError("epochs, batch_size, and queue_size must be >= 1")
        if self.temperature <= 0:
            raise PretrainError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.target_mix <= 1.0:
            raise PretrainError(f"target_mix must be in [0, 1], got {self.target_mix}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise PretrainError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if min(self.consistency_weight, self.reconstruction_weight, self.alignment_weight) < 0:
            raise PretrainError("loss weights must be non-negative")
        if not 0.0 <= self.momentum <= 1.0:
            raise PretrainError(f"momentum must be in [0, 1], got {self.momentum}")


# ---------------------------------------------------------------------------
# Momentum feature queues.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentumQueue:
    """Fixed-capacity ring buffer of unit-norm momentum features."""

    entries: np.ndarray
    cursor: int
    filled: int

    @property
    def capacity(self) -> int:
        return self.entries.shape[0]

    def filled_entries(self) -> np.ndarray:
        # Until the first wrap the filled rows are a prefix; afterwards
        # filled == capacity and every row is live.
        return self.entries[: self.filled]


def empty_queue(capacity: int, dim: int, dtype=np.float32) -> MomentumQueue:
    if capacity < 1 or dim < 1:
        raise PretrainError(f"queue needs capacity >= 1 and dim >= 1, got {capacity}, {dim}")
    return MomentumQueue(np.zeros((capacity, dim), dtype=dtype), cursor=0, filled=0)


def queue_push(queue: MomentumQueue, batch: np.ndarray) -> MomentumQueue:
    """Append a batch of unit-norm rows, overwriting the oldest entries."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != queue.entries.shape[1]:
        raise PretrainError(
            f"batch shape {batch.shape} does not match queue dim {queue.entries.shape[1]}"
        )
    if batch.shape[0] > queue.capacity:
        raise PretrainError(
            f"batch of {batch.shape[0]} exceeds queue capacity {queue.capacity}"
        )
    norms = np.linalg.norm(batch.astype(np.float64), axis=1)
    if batch.shape[0] and np.max(np.abs(norms - 1.0)) > 1e-5:
        raise PretrainError("queue rows must be unit-norm")
    entries = queue.entries.copy()
    positions = (queue.cursor + np.arange(batch.shape[0])) % queue.capacity
    entries[positions] = batch.astype(entries.dtype)
    return MomentumQueue(
        entries,
        cursor=int((queue.cursor + batch.shape[0]) % queue.capacity),
        filled=int(min(queue.capacity, queue.filled + batch.shape[0])),
    )


# ---------------------------------------------------------------------------
# Random token masking.
# ---------------------------------------------------------------------------


def random_mask(num_tokens: int, ratio: float, seed) -> np.ndarray:
    """Boolean mask with exactly round(ratio * num_tokens) True entries.

    ``seed`` is an integer or a Generator; integers get a private stream.
    """
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        rng = np.random.default_rng([_MASK_STREAM, int(seed)])
    n_masked = int(math.floor(ratio * num_tokens + 0.5))
    if not 0 < n_masked < num_tokens:
        raise PretrainError(
            f"mask ratio {ratio} with {num_tokens} tokens leaves nothing to mask or reconstruct"
        )
    mask = np.zeros(num_tokens, dtype=bool)
    mask[rng.choice(num_tokens, size=n_masked, replace=False)] = True
    return mask


def batch_masks(
    batch_size: int, num_tokens: int, ratio: float, rng: np.random.Generator
) -> np.ndarray:
    return np.stack([random_mask(num_tokens, ratio, rng) for _ in range(batch_size)])


def keep_indices(masks: np.ndarray) -> torch.Tensor:
    """Visible-position indices per row; every row keeps the same count."""
    keep = np.stack([np.flatnonzero(~row) for row in masks])
    return torch.from_numpy(keep.astype(np.int64))


# ---------------------------------------------------------------------------
# Losses.
# ---------------------------------------------------------------------------


def _directional_consistency(
    queries: torch.Tensor,
    queries_momentum: torch.Tensor,
    keys_momentum: torch.Tensor,
    key_queue: MomentumQueue,
    temperature: float,
    target_mix: float,
) -> torch.Tensor:
    b = queries.shape[0]
    keys = keys_momentum.detach()
    if key_queue.filled:
        queued = torch.from_numpy(key_queue.filled_entries().copy()).to(queries.dtype)
        keys = torch.cat([keys, queued], dim=0)
    sim = queries @ keys.t() / temperature
    with torch.no_grad():
        sim_momentum = queries_momentum @ keys.t() / temperature
        targets = target_mix * sim_momentum.softmax(dim=-1)
        identity = torch.zeros_like(targets)
        identity[:, :b] = torch.eye(b, dtype=targets.dtype)
        targets = targets + (1.0 - target_mix) * identity
    return -(F.log_softmax(sim, dim=-1) * targets).sum(dim=-1).mean()


def consistency_loss(
    z_w: torch.Tensor,
    z_n: torch.Tensor,
    zm_w: torch.Tensor,
    zm_n: torch.Tensor,
    queue_w: MomentumQueue,
    queue_n: MomentumQueue,
    temperature: float,
    target_mix: float,
) -> torch.Tensor:
    """Soft-target contrastive loss, averaged over the two directions.

    Each direction scores online features against the other modality's
    momentum batch features concatenated with its queue; targets mix the
    momentum similarity distribution with the self-match indicator.
    """
    if z_w.shape[0] == 0:
        raise PretrainError("empty batch")
    if temperature <= 0:
        raise PretrainError(f"temperature must be positive, got {temperature}")
    if not 0.0 <= target_mix <= 1.0:
        raise PretrainError(f"target_mix must be in [0, 1], got {target_mix}")
    loss_wn = _directional_consistency(z_w, zm_w, zm_n, queue_n, temperature, target_mix)
    loss_nw = _directional_consistency(z_n, zm_n, zm_w, queue_w, temperature, target_mix)
    return 0.5 * (loss_wn + loss_nw)


def _masked_pixel_weights(masks: np.ndarray, image_side: int) -> torch.Tensor:
    tokens_per_side = int(round(math.sqrt(masks.shape[1])))
    patch = image_side // tokens_per_side
    grid = torch.from_numpy(masks.reshape(-1, tokens_per_side, tokens_per_side).astype(np.float32))
    px = grid.repeat_interleave(patch, dim=1).repeat_interleave(patch, dim=2)
    return px.unsqueeze(1)


def reconstruction_loss(
    targets_w: torch.Tensor,
    targets_n: torch.Tensor,
    recon_w: torch.Tensor,
    recon_n: torch.Tensor,
    masks_w: Optional[np.ndarray] = None,
    masks_n: Optional[np.ndarray] = None,
) -> torch.Tensor:
    """Mean squared error per modality, summed over the two modalities.

    By default the mean runs over all pixels. Passing the boolean patch
    masks restricts it to masked-patch pixels only.
    """
    if targets_w.shape != recon_w.shape or targets_n.shape != recon_n.shape:
        raise PretrainError("reconstruction shapes do not match targets")
    if (masks_w is None) != (masks_n is None):
        raise PretrainError("pass patch masks for both modalities or neither")
    if masks_w is None:
        return F.mse_loss(recon_w, targets_w) + F.mse_loss(recon_n, targets_n)
    total = recon_w.new_zeros(())
    for target, recon, masks in ((targets_w, recon_w, masks_w), (targets_n, recon_n, masks_n)):
        weights = _masked_pixel_weights(masks, target.shape[-1]).to(target.dtype)
        diff2 = (recon - target) ** 2 * weights
        total = total + diff2.sum() / (weights.sum() * target.shape[1])
    return total


def alignment_loss(g_w: torch.Tensor, g_n: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetric instance-level contrastive loss on global embeddings."""
    if g_w.shape[0] == 0:
        raise PretrainError("empty batch")
    if g_w.shape != g_n.shape:
        raise PretrainError(f"embedding shapes differ: {tuple(g_w.shape)} vs {tuple(g_n.shape)}")
    if temperature <= 0:
        raise PretrainError(f"temperature must be positive, got {temperature}")
    sim = g_w @ g_n.t() / temperature
    labels = torch.arange(g_w.shape[0])
    return F.cross_entropy(sim, labels) + F.cross_entropy(sim.t(), labels)


# ---------------------------------------------------------------------------
# Batching helpers shared with fine-tuning.
# ---------------------------------------------------------------------------


def images_tensor(samples: Sequence[PairedSample], modality: str) -> torch.Tensor:
    arr = np.stack([getattr(s, modality) for s in samples])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def labels_tensor(samples: Sequence[PairedSample]) -> torch.Tensor:
    labels = [s.label for s in samples]
    if any(label is None for label in labels):
        raise PretrainError("batch contains unlabeled samples")
    return torch.tensor(labels, dtype=torch.int64)


def batch_indices(
    n: int, batch_size: int, rng: Optional[np.random.Generator] = None
) -> Iterator[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    model: Model
    optimizer: AdamW
    queue_w: MomentumQueue
    queue_n: MomentumQueue
    history: list[dict] = field(default_factory=list)


class Pretrainer:
    """Owns the model, optimizer, and queues for the pretraining stage."""

    def __init__(self, model: Model, config: PretrainConfig, train_size: int):
        self.model = model
        self.config = config
        self.model.momentum = config.momentum
        capacity = min(config.queue_size, max(1, train_size))
        self.queue_w = empty_queue(capacity, model.cfg.proj_dim)
        self.queue_n = empty_queue(capacity, model.cfg.proj_dim)
        self.optimizer = AdamW(
            model.trainable_parameters(),
            lr=config.learning_rate,
            weight_decay=config.weight_decay,
        )

    def step(
        self,
        images_w: torch.Tensor,
        images_n: torch.Tensor,
        mask_rng: np.random.Generator,
        lr: float,
    ) -> dict[str, float]:
        """One optimization step; updates momentum copies, then the queues."""
        cfg = self.config
        model = self.model
        model.train()
        num_tokens = model.cfg.num_tokens

        with torch.no_grad():
            zm_w = model.momentum_encode(images_w, WLI)
            zm_n = model.momentum_encode(images_n, NBI)

        pooled_w, _ = model.encode(images_w, WLI)
        pooled_n, _ = model.encode(images_n, NBI)
        z_w = model.project(pooled_w)
        z_n = model.project(pooled_n)
        loss_consistency = consistency_loss(
            z_w, z_n, zm_w, zm_n, self.queue_w, self.queue_n, cfg.temperature, cfg.target_mix
        )

        masks_w = batch_masks(images_w.shape[0], num_tokens, cfg.mask_ratio, mask_rng)
        masks_n = batch_masks(images_n.shape[0], num_tokens, cfg.mask_ratio, mask_rng)
        keep_w = keep_indices(masks_w)
        keep_n = keep_indices(masks_n)
        _, visible_w = model.encode(images_w, WLI, keep=keep_w)
        _, visible_n = model.encode(images_n, NBI, keep=keep_n)
        recon_w = model.decoder(visible_w, keep_w)
        recon_n = model.decoder(visible_n, keep_n)
        if cfg.reconstruct_masked_only:
            loss_reconstruction = reconstruction_loss(
                images_w, images_n, recon_w, recon_n, masks_w, masks_n
            )
        else:
            loss_reconstruction = reconstruction_loss(images_w, images_n, recon_w, recon_n)

        g_w = model.global_embed(pooled_w)
        g_n = model.global_embed(pooled_n)
        loss_alignment = alignment_loss(g_w, g_n, cfg.temperature)

        total = (
            cfg.consistency_weight * loss_consistency
            + cfg.reconstruction_weight * loss_reconstruction
            + cfg.alignment_weight * loss_alignment
        )
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step(lr=lr)
        model.update_momentum()
        self.queue_w = queue_push(self.queue_w, zm_w.numpy())
        self.queue_n = queue_push(self.queue_n, zm_n.numpy())
        return {
            "consistency": float(loss_consistency.detach()),
            "reconstruction": float(loss_reconstruction.detach()),
            "alignment": float(loss_alignment.detach()),
            "total": float(total.detach()),
        }


def pretrain_loop(
    splits: DatasetSplits,
    net_config: NetConfig,
    config: PretrainConfig,
    *,
    init_seed: int = 0,
    data_seed: int = 0,
    mask_seed: int = 0,
) -> PretrainResult:
    """Train on the train split (labels unused) and return the final state."""
    if not splits.train:
        raise PretrainError("train split is empty")
    model = build_model(net_config, seed=init_seed, momentum=config.momentum)
    trainer = Pretrainer(model, config, train_size=len(splits.train))
    order_rng = np.random.default_rng([_ORDER_STREAM, data_seed])
    mask_rng = np.random.default_rng([_MASK_STREAM, mask_seed])
    history = []
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.learning_rate, config.learning_rate_min)
        sums = {"consistency": 0.0, "reconstruction": 0.0, "alignment": 0.0, "total": 0.0}
        seen = 0
        for idx in batch_indices(len(splits.train), config.batch_size, order_rng):
            batch = [splits.train[i] for i in idx]
            losses = trainer.step(
                images_tensor(batch, WLI), images_tensor(batch, NBI), mask_rng, lr
            )
            for key in sums:
                sums[key] += losses[key] * len(batch)
            seen += len(batch)
        record = {"epoch": epoch, "learning_rate": lr}
        record.update({key: sums[key] / seen for key in sums})
        history.append(record)
    return PretrainResult(
        model=model,
        optimizer=trainer.optimizer,
        queue_w=trainer.queue_w,
        queue_n=trainer.queue_n,
        history=history,
    )
