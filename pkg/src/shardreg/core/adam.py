from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class AdamState:
    m1: np.ndarray
    m2: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), **kw)


def adam_direction(grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam direction ``m1_hat / (sqrt(m2_hat) + eps)`` and the advanced state."""
    grad = np.asarray(grad)
    if grad.shape != state.m1.shape or grad.shape != state.m2.shape:
        raise ValueError(f"shape mismatch: grad {grad.shape} vs state {state.m1.shape}")
    step = state.step + 1
    m1 = state.beta1 * state.m1 + (1.0 - state.beta1) * grad
    m2 = state.beta2 * state.m2 + (1.0 - state.beta2) * grad * grad
    m1_hat = m1 / (1.0 - state.beta1 ** step)
    m2_hat = m2 / (1.0 - state.beta2 ** step)
    direction = m1_hat / (np.sqrt(m2_hat) + state.eps)
    return direction, replace(state, m1=m1, m2=m2, step=step)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float):
    """One Adam update. Returns ``(new_param, new_state)``; inputs are not modified."""
    param = np.asarray(param)
    if param.shape != np.shape(grad):
        raise ValueError(f"shape mismatch: param {param.shape} vs grad {np.shape(grad)}")
    direction, state = adam_direction(grad, state)
    return param - lr * direction, state
