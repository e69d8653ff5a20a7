"""Adam with bias correction, plus the deterministic weight initializer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Parameter


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState) -> AdamState:
    """Apply one Adam update in place using each parameter's current ``grad``.

    m_hat / (sqrt(v_hat) + eps) with both moments bias-corrected by the
    step count. Moment buffers are created lazily in the parameter's dtype.
    """
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for p in params:
        g = p.grad
        if g.shape != p.value.shape:
            raise RuntimeError(f"gradient of {p.name} has shape {g.shape}, value has {p.value.shape}")
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        if m.shape != p.value.shape or v.shape != p.value.shape:
            raise RuntimeError(f"Adam state for {p.name} has drifted from the parameter shape {p.value.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value -= step.astype(p.value.dtype, copy=False)
    return state
