"""Adam and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

WARMUP_FRACTION = 0.3
START_DIV = 25.0
FINAL_DIV = 1e4


class MissingGradient(RuntimeError):
    pass


class Adam:
    """Adam with bias correction; moment buffers are keyed by parameter path."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradient(f"no gradient for parameter {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def adam_step(params: dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, state: Adam | None = None) -> Adam:
    """One Adam update in place; pass the returned state back in for the next step."""
    if state is None:
        state = Adam(params, beta1, beta2, eps)
    state.step(lr)
    return state


@dataclass(frozen=True)
class OneCycle:
    max_lr: float
    total: int
    warmup_fraction: float = WARMUP_FRACTION
    start_div: float = START_DIV
    final_div: float = FINAL_DIV

    def __call__(self, step: int) -> float:
        return one_cycle_lr(step, self.total, self.max_lr, self.warmup_fraction,
                            self.start_div, self.final_div)


def one_cycle_lr(step: int, total: int, max_lr: float, warmup_fraction: float = WARMUP_FRACTION,
                 start_div: float = START_DIV, final_div: float = FINAL_DIV) -> float:
    """Linear warmup from ``max_lr / start_div`` to ``max_lr``, then cosine down to ``max_lr / final_div``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    start = max_lr / start_div
    end = max_lr / final_div
    peak = warmup_fraction * total
    if step <= peak:
        if peak == 0:
            return max_lr
        return start + (max_lr - start) * step / peak
    frac = (step - peak) / (total - peak)
    return end + 0.5 * (max_lr - end) * (1.0 + math.cos(math.pi * frac))
