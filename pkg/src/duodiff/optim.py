"""AdamW with decoupled weight decay and linear learning-rate warmup."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import NumericsError, Tensor

__all__ = ["AdamWState", "adamw_step", "effective_lr"]


@dataclass
class AdamWState:
    """Optimizer state; moments are allocated lazily per parameter name."""

    lr: float = 2e-4
    weight_decay: float = 3e-2
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def effective_lr(state: AdamWState, step: int | None = None) -> float:
    """lr scaled by min(1, step / warmup_steps)."""
    s = state.step_count if step is None else step
    if state.warmup_steps <= 0:
        return state.lr
    return state.lr * min(1.0, s / state.warmup_steps)


def adamw_step(state: AdamWState, params: Mapping[str, Tensor],
               grads: Mapping[str, np.ndarray]) -> AdamWState:
    """One AdamW update, in place on ``params``.

    Bias-corrected moments, decoupled weight decay, linear warmup. Any
    non-finite gradient aborts the step before touching parameters or state.
    """
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NumericsError(f"adamw_step: non-finite gradient for {name!r}")

    step = state.step_count + 1
    lr_t = effective_lr(state, step)
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    one_m_b1, one_m_b2 = np.float32(1.0 - state.beta1), np.float32(1.0 - state.beta2)
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step

    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float32)
        if g.shape != p.data.shape:
            raise ValueError(f"adamw_step: grad shape {g.shape} != param shape "
                             f"{p.data.shape} for {name!r}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
            state.first_moment[name] = m
            state.second_moment[name] = v
        m *= b1
        m += one_m_b1 * g
        v *= b2
        v += one_m_b2 * (g * g)
        m_hat = m / np.float32(bc1)
        v_hat = v / np.float32(bc2)
        update = m_hat / (np.sqrt(v_hat) + np.float32(state.eps))
        if state.weight_decay:
            update = update + np.float32(state.weight_decay) * p.data
        p.data -= np.float32(lr_t) * update

    state.step_count = step
    return state
