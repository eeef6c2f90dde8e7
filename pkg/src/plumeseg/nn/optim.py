"""Adam with a step-decay learning-rate schedule."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from plumeseg.errors import NumericsError, ShapeError


@dataclass(frozen=True)
class TrainHyper:
    lr0: float = 5e-5
    gamma: float = 0.1
    step_epochs: int = 9
    epochs: int = 21
    batch: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch < 1 or self.step_epochs < 1 or self.epochs < 0:
            raise ValueError("batch and step_epochs must be >= 1, epochs >= 0")


def lr_at_epoch(hyper: TrainHyper, epoch: int) -> float:
    """``lr0 * gamma ** (epoch // step_epochs)``.

    Evaluated in decimal on the shortest repr of ``lr0`` and ``gamma`` so that
    e.g. 5e-5 decayed once by 0.1 is exactly the float ``5e-6``.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = epoch // hyper.step_epochs
    return float(Decimal(repr(hyper.lr0)) * Decimal(repr(hyper.gamma)) ** k)


@dataclass
class ModelState:
    """Named parameters plus Adam moment buffers and the optimizer step count."""

    params: OrderedDict = field(default_factory=OrderedDict)
    adam_m: OrderedDict = field(default_factory=OrderedDict)
    adam_v: OrderedDict = field(default_factory=OrderedDict)
    step: int = 0

    @classmethod
    def from_params(cls, params) -> ModelState:
        params = OrderedDict(params)
        return cls(
            params,
            OrderedDict((k, np.zeros_like(v)) for k, v in params.items()),
            OrderedDict((k, np.zeros_like(v)) for k, v in params.items()),
            0,
        )

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> ModelState:
        return ModelState(
            OrderedDict((k, v.copy()) for k, v in self.params.items()),
            OrderedDict((k, v.copy()) for k, v in self.adam_m.items()),
            OrderedDict((k, v.copy()) for k, v in self.adam_v.items()),
            self.step,
        )


def adam_step(state: ModelState, grads, lr: float, hyper: TrainHyper) -> ModelState:
    """Apply one bias-corrected Adam update in place and return ``state``."""
    for name, p in state.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in state.params.items():
        g = grads[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)).astype(p.dtype)
    return state
