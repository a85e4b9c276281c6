"""AdamW with decoupled weight decay and linear warmup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numkernel import Tensor

ADAM_EPS = 1e-8


def lr_at(step: int, lr: float, warmup_steps: int) -> float:
    """Linear ramp from 0 over the warmup, constant afterwards; step is 1-based."""
    if warmup_steps <= 0:
        return lr
    return lr * min(1.0, step / warmup_steps)


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def moments(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {name: (self.m[name], self.v[name]) for name in sorted(self.m)}


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float,
               beta1: float = 0.9, beta2: float = 0.95,
               weight_decay: float = 0.0, warmup_steps: int = 0) -> float:
    """One decoupled-weight-decay update over ``params`` with ``.grad`` set.

    Missing gradients count as zero. Returns the learning rate actually
    applied after the warmup schedule.
    """
    state.step += 1
    step_lr = lr_at(state.step, lr, warmup_steps)
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = p.data - step_lr * update
    return step_lr
