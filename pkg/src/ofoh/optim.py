"""AdamW with decoupled weight decay, plus the two learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list.

    Weight decay is applied directly to the parameters (scaled by the
    effective learning rate), separate from the gradient-moment update.
    """

    def __init__(self, params: Sequence[Tensor], base_lr: float,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        if base_lr <= 0:
            raise ContractError("base_lr must be positive")
        if weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")
        self.params = list(params)
        self.base_lr = float(base_lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        """One update; ``lr`` overrides ``base_lr`` (schedules pass it in)."""
        lr = self.base_lr if lr is None else float(lr)
        if lr <= 0:
            raise ContractError("lr must be positive")
        for p in self.params:
            if p.grad is None:
                raise ContractError("adamw step with missing gradient; "
                                    "call backward first")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


@dataclass
class StepDecay:
    """Piecewise-constant schedule: base_lr times factors[i] from milestone i on."""
    base_lr: float
    milestones: list[int] = field(default_factory=list)
    factors: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ContractError("base_lr must be positive")
        if len(self.milestones) != len(self.factors):
            raise ContractError("milestones and factors must pair up")
        if sorted(self.milestones) != list(self.milestones):
            raise ContractError("milestones must be increasing")


@dataclass
class CosineDecay:
    """Half-cosine from base_lr at epoch 0 down to 0 at total_epochs."""
    base_lr: float
    total_epochs: int

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ContractError("base_lr must be positive")
        if self.total_epochs <= 0:
            raise ContractError("total_epochs must be positive")


def lr_at(schedule, epoch: int) -> float:
    """Learning rate of ``schedule`` at integer ``epoch``."""
    if epoch < 0:
        raise ContractError(f"epoch {epoch} out of range")
    if isinstance(schedule, StepDecay):
        factor = 1.0
        for milestone, f in zip(schedule.milestones, schedule.factors):
            if epoch >= milestone:
                factor = f
        return schedule.base_lr * factor
    if isinstance(schedule, CosineDecay):
        if epoch > schedule.total_epochs:
            raise ContractError(
                f"epoch {epoch} beyond total_epochs {schedule.total_epochs}"
            )
        return schedule.base_lr * 0.5 * (
            1.0 + np.cos(np.pi * epoch / schedule.total_epochs)
        )
    raise ContractError(f"unknown schedule type {type(schedule).__name__}")
