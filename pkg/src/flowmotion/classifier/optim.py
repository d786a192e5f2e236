"""SGD with momentum and L2 weight decay, and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from ..errors import NumericError

Tensors = Dict[str, np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.01
    weight_decay: float = 0.01
    momentum: float = 0.9
    step_size: int = 10
    gamma: float = 0.5
    epochs: int = 30
    seed: int = 0
    flip_probability: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip_probability must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: ``learning_rate * gamma ** (epoch // step_size)``."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return cfg.learning_rate * cfg.gamma ** (epoch // cfg.step_size)


def sgd_step(
    params: Tensors,
    grads: Tensors,
    velocity: Optional[Tensors],
    cfg: TrainConfig,
    lr: float,
) -> Tuple[Tensors, Tensors]:
    """One momentum step; returns new ``(params, velocity)`` without mutating inputs.

    Weight decay is added to the gradient before the momentum update.
    """
    new_params: Tensors = {}
    new_velocity: Tensors = {}
    for name, w in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        g = g + cfg.weight_decay * w
        v_prev = velocity.get(name) if velocity else None
        v = g if v_prev is None else cfg.momentum * v_prev + g
        new_velocity[name] = v.astype(w.dtype, copy=False)
        new_params[name] = (w - lr * v).astype(w.dtype, copy=False)
    return new_params, new_velocity

