"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .nn import Parameter
from .tensor import NonFiniteError


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int
    total_steps: int
    lr_max: float = 1e-4
    lr_min: float = 1e-6

    def __post_init__(self) -> None:
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps < total_steps, got "
                             f"{self.warmup_steps} and {self.total_steps}")


def lr_at(step: int, sched: Schedule) -> float:
    """Linear ramp 0 -> lr_max over the warmup, then cosine decay to lr_min at ``total_steps``."""
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        return sched.lr_max * step / sched.warmup_steps
    t = step - sched.warmup_steps
    span = sched.total_steps - sched.warmup_steps
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + math.cos(math.pi * t / span))


class AdamW:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, weight_decay: float = 1e-2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                             for p in self.params if p.grad is not None))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm:
            factor = max_norm / (norm + 1e-6)
            for p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * p.dtype.type(factor)
        return norm

    def step(self, lr: Optional[float] = None) -> None:
        """One update; parameters without a gradient are treated as having zero gradient."""
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError("adamw_step (gradient)")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            dt = p.dtype.type
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            m_hat = m / dt(c1)
            v_hat = v / dt(c2)
            update = m_hat / (np.sqrt(v_hat) + dt(self.eps))
            p.data = p.data - dt(lr) * update - dt(lr * self.weight_decay) * p.data
