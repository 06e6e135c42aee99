"""Adam with bias correction and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import NonFiniteError


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Sequence[tuple[str, Tensor]],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    clip_norm: float | None = None,
) -> None:
    """Update ``params`` in place. Parameters absent from ``grads`` see a zero gradient."""
    for name, _ in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter group {name!r}")
    scale = 1.0
    if clip_norm is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > clip_norm:
            scale = clip_norm / norm
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params:
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else g * scale
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"parameter group {name!r} became non-finite after step {state.t}")


@dataclass
class PlateauSchedule:
    """Halve the learning rate after ``patience`` epochs without relative improvement."""

    lr: float = 1e-3
    factor: float = 0.5
    patience: int = 20
    min_lr: float = 1e-5
    threshold: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, loss: float) -> float:
        if not math.isfinite(loss):
            raise NonFiniteError(f"epoch loss is {loss}")
        if loss < self.best - self.threshold * abs(self.best) or math.isinf(self.best):
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr
