"""SGD with momentum and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")
        self.name = name


@dataclass
class SgdMomentumState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_momentum_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray] | None,
                      state: SgdMomentumState) -> None:
    """In-place update ``v = mu*v + (g + wd*p); p -= lr*v``.

    ``grads=None`` uses each parameter's ``.grad``; parameters without a gradient
    are treated as having a zero gradient (weight decay still applies).  All
    gradients are validated before any parameter is touched.
    """
    if state.lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {state.lr}")
    resolved = {}
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        resolved[name] = g
    dt = lambda p, c: p.data.dtype.type(c)  # noqa: E731
    for name, p in params.items():
        g = resolved[name]
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = dt(p, state.momentum) * v + (g + dt(p, state.weight_decay) * p.data)
        state.velocity[name] = v.astype(p.data.dtype, copy=False)
        p.data = p.data - dt(p, state.lr) * state.velocity[name]


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
