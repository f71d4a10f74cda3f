"""AdamW and a linear-warmup cosine-annealing learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 2e-3
    warmup: int = 20
    total: int = 2000
    floor_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup <= self.total:
            raise ValueError("need 0 <= warmup <= total")


def lr_at(t, sched):
    """Learning rate at step ``t``: linear ramp from 0, then half-cosine decay."""
    if t < sched.warmup:
        return sched.peak_lr * t / sched.warmup
    span = sched.total - sched.warmup
    if span == 0:
        return sched.peak_lr
    frac = (t - sched.warmup) / span
    return sched.floor_lr + 0.5 * (sched.peak_lr - sched.floor_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamWState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, decay=0.0):
    """One AdamW update, applied in place.  Returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if decay:
            p -= lr * decay * p
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
