"""Adam with bias correction, and a constant-then-linear-decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ModelParams

DEFAULT_LR = 1e-4
# decay begins at epoch 150 of 400
DEFAULT_DECAY_START = 150 / 400


class OptimizerError(RuntimeError):
    pass


@dataclass
class AdamState:
    base_lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, state: AdamState, lr: float | None = None) -> None:
    """One in-place Adam update from the accumulated grads. Grads are left alone."""
    lr = state.base_lr if lr is None else float(lr)
    if lr < 0:
        raise OptimizerError(f"learning rate must be >= 0, got {lr}")
    for name, t in params.items():
        if t.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient buffer")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, t in params.items():
        g = t.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    total_epochs: int
    decay_start_fraction: float = DEFAULT_DECAY_START

    def __post_init__(self):
        if self.total_epochs <= 0:
            raise ValueError("total_epochs must be positive")
        if not 0.0 < self.decay_start_fraction < 1.0:
            raise ValueError("decay_start_fraction must lie in (0, 1)")

    @property
    def decay_start(self) -> int:
        return int(round(self.total_epochs * self.decay_start_fraction))


def lr_at(schedule: LrSchedule, epoch: int, base_lr: float = DEFAULT_LR) -> float:
    """base_lr up to decay_start, then linear toward zero at total_epochs."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    start, total = schedule.decay_start, schedule.total_epochs
    if epoch <= start:
        return base_lr
    return base_lr * (total - epoch) / (total - start)
