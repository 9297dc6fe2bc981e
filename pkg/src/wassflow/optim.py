"""Adam and plain SGD on flat parameter vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, params, grad, lr: float):
    """One Adam update; returns (new_params, new_state) and leaves inputs untouched."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and state lengths must match")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = m / (1.0 - state.beta1**t)
    vhat = v / (1.0 - state.beta2**t)
    new = params - lr * mhat / (np.sqrt(vhat) + state.eps)
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def sgd_step(params, grad, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape:
        raise ValueError("parameter and gradient lengths must match")
    return params - lr * grad
