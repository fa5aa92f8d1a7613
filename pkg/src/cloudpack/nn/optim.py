"""Adam and Polyak averaging over flat parameter vectors or modules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, lr: float,
              state: AdamState) -> np.ndarray:
    """One Adam update; ``state`` is advanced in place, new params returned."""
    params = np.asarray(params, float)
    grads = np.asarray(grads, float)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("params, grads and optimizer state must share a shape")
    state.t += 1
    state.m = BETA1 * state.m + (1 - BETA1) * grads
    state.v = BETA2 * state.v + (1 - BETA2) * grads ** 2
    m_hat = state.m / (1 - BETA1 ** state.t)
    v_hat = state.v / (1 - BETA2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + EPS)


@dataclass
class Adam:
    """Adam bound to a module; steps along ``-grad`` of the module's
    accumulated gradients (or an explicit flat gradient)."""

    module: object
    lr: float = 1e-3
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros(self.module.n_params)

    def step(self, grad: np.ndarray = None):
        g = self.module.flat_grad() if grad is None else grad
        self.module.set_flat_params(
            adam_step(self.module.flat_params(), g, self.lr, self.state))


def polyak_update(target_params: np.ndarray, params: np.ndarray, rho: float) -> np.ndarray:
    """``rho * target + (1 - rho) * params``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must be in [0, 1]")
    return rho * np.asarray(target_params, float) + (1.0 - rho) * np.asarray(params, float)
