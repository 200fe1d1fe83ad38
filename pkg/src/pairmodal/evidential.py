"""Dirichlet-based evidential classification: subjective opinions derived
from non-negative evidence, reduced Dempster combination of two opinions,
and the expected cross-entropy / KL losses used during fine-tuning.

All operations accept arbitrary leading batch dimensions and stay
differentiable with respect to the underlying logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class EvidentialError(ValueError):
    """Raised for invalid opinions, concentrations, or labels."""


def _tolerance(dtype: torch.dtype) -> float:
    return 1e-12 if dtype == torch.float64 else 1e-5


@dataclass(frozen=True)
class DirichletParams:
    """Concentration vector(s) over classes; every entry is >= 1."""

    concentration: torch.Tensor

    def __post_init__(self) -> None:
        c = self.concentration
        if c.ndim < 1 or c.shape[-1] < 2:
            raise EvidentialError(f"need at least 2 classes, got shape {tuple(c.shape)}")
        if bool((c.detach() < 1.0 - _tolerance(c.dtype)).any()):
            raise EvidentialError("concentration entries must be >= 1")

    @property
    def num_classes(self) -> int:
        return self.concentration.shape[-1]

    @property
    def strength(self) -> torch.Tensor:
        """Dirichlet strength: the sum of concentrations."""
        return self.concentration.sum(dim=-1)


@dataclass(frozen=True)
class EvidentialOpinion:
    """Per-class belief masses plus an uncertainty mass, summing to one."""

    belief: torch.Tensor
    uncertainty: torch.Tensor

    def __post_init__(self) -> None:
        b, u = self.belief, self.uncertainty
        if b.ndim < 1 or b.shape[-1] < 2:
            raise EvidentialError(f"need at least 2 classes, got shape {tuple(b.shape)}")
        if u.shape != b.shape[:-1]:
            raise EvidentialError(
                f"uncertainty shape {tuple(u.shape)} does not match belief {tuple(b.shape)}"
            )
        tol = _tolerance(b.dtype)
        if bool((b.detach() < -tol).any()) or bool((u.detach() < -tol).any()):
            raise EvidentialError("belief and uncertainty masses must be non-negative")
        total = b.detach().sum(dim=-1) + u.detach()
        if bool((total - 1.0).abs().max() > 10 * tol):
            raise EvidentialError("belief masses plus uncertainty must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.belief.shape[-1]


def evidence_from_logits(logits: torch.Tensor) -> DirichletParams:
    """Map raw logits to concentrations: softplus evidence plus one."""
    return DirichletParams(F.softplus(logits) + 1.0)


def concentration_to_opinion(params: DirichletParams) -> EvidentialOpinion:
    strength = params.strength.unsqueeze(-1)
    belief = (params.concentration - 1.0) / strength
    uncertainty = params.num_classes / strength.squeeze(-1)
    return EvidentialOpinion(belief, uncertainty)


def opinion_to_concentration(op: EvidentialOpinion) -> DirichletParams:
    if bool((op.uncertainty.detach() <= 0).any()):
        raise EvidentialError("zero-uncertainty opinions have no finite concentration")
    strength = op.num_classes / op.uncertainty
    return DirichletParams(op.belief * strength.unsqueeze(-1) + 1.0)


def combine(op1: EvidentialOpinion, op2: EvidentialOpinion) -> EvidentialOpinion:
    """Reduced Dempster combination of two opinions over the same classes."""
    if op1.belief.shape != op2.belief.shape:
        raise EvidentialError(
            f"opinion shapes differ: {tuple(op1.belief.shape)} vs {tuple(op2.belief.shape)}"
        )
    b1, b2 = op1.belief, op2.belief
    u1, u2 = op1.uncertainty, op2.uncertainty
    # Conflict is the total mass on mismatched class pairs.
    conflict = b1.sum(dim=-1) * b2.sum(dim=-1) - (b1 * b2).sum(dim=-1)
    denom = 1.0 - conflict
    if bool((denom.detach() <= 0).any()):
        raise EvidentialError("total conflict: opinions are incompatible")
    denom = denom.unsqueeze(-1)
    belief = (b1 * b2 + b1 * u2.unsqueeze(-1) + b2 * u1.unsqueeze(-1)) / denom
    uncertainty = (u1 * u2).unsqueeze(-1) / denom
    return EvidentialOpinion(belief, uncertainty.squeeze(-1))


def expected_probability(params: DirichletParams) -> torch.Tensor:
    return params.concentration / params.strength.unsqueeze(-1)


def predict(op: EvidentialOpinion) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return (predicted class, expected probabilities, uncertainty)."""
    probs = expected_probability(opinion_to_concentration(op))
    return probs.argmax(dim=-1), probs, op.uncertainty


def _check_one_hot(y: torch.Tensor, params: DirichletParams) -> None:
    if y.shape != params.concentration.shape:
        raise EvidentialError(
            f"labels {tuple(y.shape)} do not match concentration {tuple(params.concentration.shape)}"
        )
    if bool(((y != 0) & (y != 1)).any()) or bool((y.sum(dim=-1) != 1).any()):
        raise EvidentialError("labels must be one-hot")


def evidential_nll(params: DirichletParams, y: torch.Tensor) -> torch.Tensor:
    """Expected cross-entropy under the Dirichlet: sum_c y_c (psi(S) - psi(l_c))."""
    _check_one_hot(y, params)
    strength = params.strength.unsqueeze(-1)
    per_sample = (y * (torch.digamma(strength) - torch.digamma(params.concentration))).sum(dim=-1)
    return per_sample.mean()


def kl_regularizer(params: DirichletParams, y: torch.Tensor, theta: float) -> torch.Tensor:
    """theta-scaled KL between label-masked concentrations and the flat prior.

    The true class keeps concentration 1; surviving off-class evidence is
    pushed toward the uniform Dirichlet.
    """
    _check_one_hot(y, params)
    if not 0.0 <= theta <= 1.0:
        raise EvidentialError(f"theta must be in [0, 1], got {theta}")
    masked = y + (1.0 - y) * params.concentration
    strength = masked.sum(dim=-1)
    c = params.num_classes
    ones = torch.ones_like(masked)
    kl = (
        torch.lgamma(strength)
        - torch.lgamma(masked).sum(dim=-1)
        - torch.lgamma(ones.sum(dim=-1))
        + ((masked - 1.0) * (torch.digamma(masked) - torch.digamma(strength.unsqueeze(-1)))).sum(
            dim=-1
        )
    )
    return theta * kl.mean()


def annealing_coefficient(epoch: int, horizon: int) -> float:
    """KL weight ramp: 0 at epoch 0, reaching 1 at the horizon."""
    if horizon < 1:
        raise EvidentialError(f"annealing horizon must be >= 1, got {horizon}")
    return min(1.0, epoch / horizon)


def evidential_loss_bundle(
    logits_w: torch.Tensor, logits_n: torch.Tensor, y: torch.Tensor, theta: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-modality and fused evidential losses for one labeled batch.

    Returns (modality loss, fused loss): the modality term sums the expected
    cross-entropy plus annealed KL over both single-modality opinions; the
    fused term applies the same criterion to their Dempster combination.
    """
    params_w = evidence_from_logits(logits_w)
    params_n = evidence_from_logits(logits_n)
    modality_loss = (
        evidential_nll(params_w, y)
        + kl_regularizer(params_w, y, theta)
        + evidential_nll(params_n, y)
        + kl_regularizer(params_n, y, theta)
    )
    fused = combine(concentration_to_opinion(params_w), concentration_to_opinion(params_n))
    params_fused = opinion_to_concentration(fused)
    fused_loss = evidential_nll(params_fused, y) + kl_regularizer(params_fused, y, theta)
    return modality_loss, fused_loss
