"""Fusion fine-tuning on the labeled subset: shift-vector feature
augmentation around the fused representation, per-modality evidential heads
with Dempster-combined opinions, EMA weight tracking, and evaluation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, STAGE_PRETRAIN, require_stage, restore_model
from .data import NBI, WLI, DatasetSplits, PairedSample, make_label_fraction_view
from .evidential import (
    annealing_coefficient,
    combine,
    concentration_to_opinion,
    evidence_from_logits,
    evidential_loss_bundle,
    predict,
)
from .networks import Model, NetConfig, build_model, ema_update_
from .optim import AdamW, cosine_lr
from .pretraining import batch_indices, images_tensor, labels_tensor
from .shiftdict import ShiftVectorDictionary, draw_shift

_ORDER_STREAM = 401
_SHIFT_STREAM = 402

MODALITY_CHOICES = ("both", WLI, NBI)


class FinetuneError(ValueError):
    """Raised for invalid fine-tuning configuration or inputs."""


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    learning_rate_min: float = 1e-6
    weight_decay: float = 0.02
    ema_decay: float = 0.999
    annealing_epochs: int = 10
    label_fraction: float = 1.0
    use_svd: bool = True
    use_tmc: bool = True
    per_sample_shifts: bool = False
    centered_shifts: bool = False
    freeze_encoders: bool = False
    modality: str = "both"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise FinetuneError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise FinetuneError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.annealing_epochs < 1:
            raise FinetuneError("annealing_epochs must be >= 1")
        if not 0.0 < self.label_fraction <= 1.0:
            raise FinetuneError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.modality not in MODALITY_CHOICES:
            raise FinetuneError(f"modality must be one of {MODALITY_CHOICES}")


def shift_augment(features: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """Add a shift vector (one per batch, or one per sample) to features."""
    if features.ndim != 2:
        raise FinetuneError(f"features must be (B, D), got {tuple(features.shape)}")
    if shift.shape not in ((features.shape[1],), features.shape):
        raise FinetuneError(
            f"shift shape {tuple(shift.shape)} incompatible with features {tuple(features.shape)}"
        )
    return features + shift


def fusion_classification_loss(
    classifier: nn.Module,
    z_fused: torch.Tensor,
    z_fused_w: torch.Tensor,
    z_fused_n: torch.Tensor,
    labels: torch.Tensor,
) -> torch.Tensor:
    """Cross-entropy on the fused feature and its two shifted variants."""
    return (
        F.cross_entropy(classifier(z_fused), labels)
        + F.cross_entropy(classifier(z_fused_w), labels)
        + F.cross_entropy(classifier(z_fused_n), labels)
    )


def forward_features(
    model: Model, images_w: torch.Tensor, images_n: torch.Tensor, modality: str = "both"
) -> tuple[Optional[torch.Tensor], Optional[torch.Tensor], torch.Tensor]:
    """Return (z_w, z_n, z_fused); single-modality mode skips fusion."""
    if modality == "both":
        pooled_w, _ = model.encode(images_w, WLI)
        pooled_n, _ = model.encode(images_n, NBI)
        return pooled_w, pooled_n, model.fusion(pooled_w, pooled_n)
    if modality == WLI:
        pooled_w, _ = model.encode(images_w, WLI)
        return pooled_w, None, pooled_w
    pooled_n, _ = model.encode(images_n, NBI)
    return None, pooled_n, pooled_n


class Finetuner:
    """Owns the online model, its EMA copy, and the optimizer."""

    def __init__(self, model: Model, config: FinetuneConfig, svd: Optional[ShiftVectorDictionary]):
        if config.use_svd and config.modality == "both":
            if svd is None:
                raise FinetuneError("use_svd requires a shift dictionary")
            if svd.feature_dim != model.cfg.embed_dim:
                raise FinetuneError(
                    f"shift dimension {svd.feature_dim} != feature dimension {model.cfg.embed_dim}"
                )
        self.model = model
        self.config = config
        self.svd = svd
        if config.freeze_encoders:
            for encoder in (model.encoder_w, model.encoder_n):
                for p in encoder.parameters():
                    p.requires_grad_(False)
        self.optimizer = AdamW(
            model.trainable_parameters(),
            lr=config.learning_rate,
            weight_decay=config.weight_decay,
        )
        self.ema_model = copy.deepcopy(model)
        for p in self.ema_model.parameters():
            p.requires_grad_(False)
        self.ema_model.eval()

    def _draw_shifts(
        self, batch_size: int, dtype: torch.dtype, shift_rng: np.random.Generator
    ) -> tuple[torch.Tensor, torch.Tensor]:
        cfg = self.config
        if not cfg.use_svd:
            dim = self.model.cfg.embed_dim
            zero = torch.zeros(dim, dtype=dtype)
            return zero, zero
        count = batch_size if cfg.per_sample_shifts else None
        s_w, s_n = draw_shift(self.svd, shift_rng, centered=cfg.centered_shifts, count=count)
        return (
            torch.from_numpy(np.ascontiguousarray(s_w)).to(dtype),
            torch.from_numpy(np.ascontiguousarray(s_n)).to(dtype),
        )

    def step(
        self,
        images_w: torch.Tensor,
        images_n: torch.Tensor,
        labels: torch.Tensor,
        theta: float,
        lr: float,
        shift_rng: np.random.Generator,
    ) -> dict[str, float]:
        cfg = self.config
        model = self.model
        model.train()
        z_w, z_n, z_fused = forward_features(model, images_w, images_n, cfg.modality)

        if cfg.modality == "both":
            s_w, s_n = self._draw_shifts(images_w.shape[0], z_fused.dtype, shift_rng)
            loss_cls = fusion_classification_loss(
                model.classifier,
                z_fused,
                shift_augment(z_fused, s_w),
                shift_augment(z_fused, s_n),
                labels,
            )
        else:
            loss_cls = F.cross_entropy(model.classifier(z_fused), labels)

        if cfg.use_tmc and cfg.modality == "both":
            y = F.one_hot(labels, model.cfg.num_classes).to(z_fused.dtype)
            loss_modality, loss_fused = evidential_loss_bundle(
                model.evidence_w(z_w), model.evidence_n(z_n), y, theta
            )
            total = loss_cls + loss_modality + loss_fused
        else:
            loss_modality = z_fused.new_zeros(())
            loss_fused = z_fused.new_zeros(())
            total = loss_cls

        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step(lr=lr)
        ema_update_(self.ema_model, model, cfg.ema_decay)
        return {
            "classification": float(loss_cls.detach()),
            "modality_evidence": float(loss_modality.detach()),
            "fused_evidence": float(loss_fused.detach()),
            "total": float(total.detach()),
        }


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    mean_uncertainty: float
    per_class_accuracy: tuple[float, ...]
    confusion: np.ndarray
    num_samples: int


@torch.no_grad()
def _predict_batch(
    model: Model, batch: Sequence[PairedSample], use_tmc: bool, modality: str
) -> tuple[np.ndarray, np.ndarray]:
    images_w = images_tensor(batch, WLI)
    images_n = images_tensor(batch, NBI)
    z_w, z_n, z_fused = forward_features(model, images_w, images_n, modality)
    if modality == "both":
        opinion_w = concentration_to_opinion(evidence_from_logits(model.evidence_w(z_w)))
        opinion_n = concentration_to_opinion(evidence_from_logits(model.evidence_n(z_n)))
        fused_opinion = combine(opinion_w, opinion_n)
    else:
        head = model.evidence_w if modality == WLI else model.evidence_n
        fused_opinion = concentration_to_opinion(evidence_from_logits(head(z_fused)))
    if use_tmc and modality == "both":
        classes, _, uncertainty = predict(fused_opinion)
    else:
        classes = model.classifier(z_fused).argmax(dim=-1)
        uncertainty = fused_opinion.uncertainty
    return classes.numpy(), uncertainty.numpy()


def evaluate_model(
    model: Model,
    samples: Sequence[PairedSample],
    batch_size: int = 64,
    use_tmc: bool = True,
    modality: str = "both",
) -> MetricsReport:
    """Accuracy, per-class accuracy, confusion matrix, and mean uncertainty."""
    if not samples:
        raise FinetuneError("no samples to evaluate")
    if any(s.label is None for s in samples):
        raise FinetuneError("evaluation requires labeled samples")
    model.eval()
    num_classes = model.cfg.num_classes
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    uncertainties = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        classes, uncertainty = _predict_batch(model, batch, use_tmc, modality)
        for sample, pred in zip(batch, classes):
            confusion[sample.label, int(pred)] += 1
        uncertainties.append(uncertainty)
    correct = np.trace(confusion)
    row_totals = confusion.sum(axis=1)
    per_class = tuple(
        float(confusion[c, c] / row_totals[c]) if row_totals[c] else float("nan")
        for c in range(num_classes)
    )
    return MetricsReport(
        accuracy=float(correct / len(samples)),
        mean_uncertainty=float(np.concatenate(uncertainties).mean()),
        per_class_accuracy=per_class,
        confusion=confusion,
        num_samples=len(samples),
    )


def format_report(report: MetricsReport) -> str:
    lines = [
        f"samples: {report.num_samples}",
        f"accuracy: {report.accuracy:.6f}",
        f"mean_uncertainty: {report.mean_uncertainty:.6f}",
    ]
    for c, acc in enumerate(report.per_class_accuracy):
        lines.append(f"class_accuracy_{c}: {acc:.6f}")
    lines.append("confusion_matrix:")
    for row in report.confusion:
        lines.append(" ".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


@torch.no_grad()
def export_embeddings(
    model: Model, samples: Sequence[PairedSample], batch_size: int = 64
) -> str:
    """Delimited text: header line, then id, label, and the fused feature."""
    if not samples:
        raise FinetuneError("no samples to export")
    model.eval()
    dim = model.cfg.embed_dim
    lines = ["\t".join(["id", "label"] + [f"f{i}" for i in range(dim)])]
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        _, _, z_fused = forward_features(
            model, images_tensor(batch, WLI), images_tensor(batch, NBI), "both"
        )
        feats = z_fused.numpy()
        for sample, row in zip(batch, feats):
            label = "" if sample.label is None else str(sample.label)
            values = "\t".join(f"{v:.8e}" for v in row)
            lines.append(f"{sample.id}\t{label}\t{values}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    model: Model
    ema_model: Model
    best_ema_arrays: dict[str, np.ndarray]
    best_epoch: int
    best_val_accuracy: float
    history: list[dict] = field(default_factory=list)


def finetune_loop(
    splits: DatasetSplits,
    net_config: NetConfig,
    config: FinetuneConfig,
    *,
    start: Optional[Checkpoint] = None,
    svd: Optional[ShiftVectorDictionary] = None,
    init_seed: int = 0,
    data_seed: int = 0,
    shift_seed: int = 0,
    label_seed: int = 0,
) -> FinetuneResult:
    """Fine-tune on the labeled fraction of the train split.

    ``start`` is an optional pretraining checkpoint; without it the model
    trains from random initialization. The EMA snapshot with the best
    validation accuracy is kept (final snapshot if there is no val split).
    """
    view = make_label_fraction_view(splits, config.label_fraction, seed=label_seed)
    if not view.labeled:
        raise FinetuneError("no labeled samples to fine-tune on")
    if start is not None:
        require_stage(start, STAGE_PRETRAIN)
        if start.net_config != net_config:
            raise FinetuneError(
                "checkpoint architecture does not match the requested configuration"
            )
        model = restore_model(start)
    else:
        model = build_model(net_config, seed=init_seed)
    trainer = Finetuner(model, config, svd)
    order_rng = np.random.default_rng([_ORDER_STREAM, data_seed])
    shift_rng = np.random.default_rng([_SHIFT_STREAM, shift_seed])

    history = []
    best_epoch = -1
    best_val = -1.0
    best_arrays: dict[str, np.ndarray] = {}
    labeled = view.labeled
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.learning_rate, config.learning_rate_min)
        theta = annealing_coefficient(epoch, config.annealing_epochs)
        sums = {"classification": 0.0, "modality_evidence": 0.0, "fused_evidence": 0.0, "total": 0.0}
        seen = 0
        for idx in batch_indices(len(labeled), config.batch_size, order_rng):
            batch = [labeled[i] for i in idx]
            losses = trainer.step(
                images_tensor(batch, WLI),
                images_tensor(batch, NBI),
                labels_tensor(batch),
                theta,
                lr,
                shift_rng,
            )
            for key in sums:
                sums[key] += losses[key] * len(batch)
            seen += len(batch)
        record = {"epoch": epoch, "learning_rate": lr, "theta": theta}
        record.update({key: sums[key] / seen for key in sums})
        if splits.val:
            val_report = evaluate_model(
                trainer.ema_model, splits.val, config.batch_size, config.use_tmc, config.modality
            )
            record["val_accuracy"] = val_report.accuracy
            record["val_uncertainty"] = val_report.mean_uncertainty
            if val_report.accuracy > best_val:
                best_val = val_report.accuracy
                best_epoch = epoch
                best_arrays = {
                    name: tensor.detach().numpy().copy()
                    for name, tensor in trainer.ema_model.state_dict().items()
                }
        history.append(record)
    if not best_arrays:
        best_epoch = config.epochs - 1
        best_val = float("nan")
        best_arrays = {
            name: tensor.detach().numpy().copy()
            for name, tensor in trainer.ema_model.state_dict().items()
        }
    return FinetuneResult(
        model=model,
        ema_model=trainer.ema_model,
        best_ema_arrays=best_arrays,
        best_epoch=best_epoch,
        best_val_accuracy=best_val,
        history=history,
    )
