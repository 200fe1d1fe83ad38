"""Decoupled-weight-decay Adam over named parameters, with state that
serializes to plain named arrays, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn as nn


class AdamW:
    """Adam with decoupled weight decay.

    Weight decay multiplies each parameter by (1 - lr * wd) before the
    moment-based update, so a zero gradient still decays the parameter
    while a missing (None) gradient skips it entirely.
    """

    def __init__(
        self,
        named_params: Mapping[str, nn.Parameter] | Iterable[tuple[str, nn.Parameter]],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.02,
    ):
        self.params = dict(named_params)
        if not self.params:
            raise ValueError("optimizer needs at least one parameter")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {
            name: {
                "step": 0,
                "exp_avg": torch.zeros_like(p, requires_grad=False),
                "exp_avg_sq": torch.zeros_like(p, requires_grad=False),
            }
            for name, p in self.params.items()
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            self.lr = lr
        beta1, beta2 = self.betas
        for name, p in self.params.items():
            if p.grad is None:
                continue
            state = self.state[name]
            state["step"] += 1
            t = state["step"]
            if self.weight_decay != 0.0:
                p.mul_(1.0 - self.lr * self.weight_decay)
            exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]
            exp_avg.mul_(beta1).add_(p.grad, alpha=1.0 - beta1)
            exp_avg_sq.mul_(beta2).addcmul_(p.grad, p.grad, value=1.0 - beta2)
            bias1 = 1.0 - beta1**t
            bias2 = 1.0 - beta2**t
            step_size = self.lr / bias1
            denom = (exp_avg_sq / bias2).sqrt_().add_(self.eps)
            p.addcdiv_(exp_avg, denom, value=-step_size)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flatten optimizer state to named float arrays (checkpoint format)."""
        arrays: dict[str, np.ndarray] = {}
        for name, state in self.state.items():
            arrays[f"{name}.step"] = np.asarray([state["step"]], dtype=np.int64)
            arrays[f"{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy().copy()
            arrays[f"{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy().copy()
        return arrays

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            state = self.state[name]
            state["step"] = int(arrays[f"{name}.step"][0])
            state["exp_avg"] = torch.from_numpy(
                np.array(arrays[f"{name}.exp_avg"])
            ).to(p.dtype)
            state["exp_avg_sq"] = torch.from_numpy(
                np.array(arrays[f"{name}.exp_avg_sq"])
            ).to(p.dtype)


def cosine_lr(epoch: int, total_epochs: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from lr_max (epoch 0) to lr_min (last epoch)."""
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if total_epochs == 1:
        return lr_max
    t = epoch / (total_epochs - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t))
