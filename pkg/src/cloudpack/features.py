"""Fixed-length feature windows for the forecaster and the critic."""
from __future__ import annotations

import numpy as np

LOOKBACK = 24


def forecaster_window(demands: np.ndarray, covariates: np.ndarray, t: int,
                      lookback: int = LOOKBACK, scale: float = 100.0) -> np.ndarray:
    """``(N, lookback, 1 + K)`` window ending at step ``t`` (inclusive).

    Channel 0 is demand / ``scale``, the rest are covariates. Steps before
    the start of the trace are zero-padded.
    """
    n, _ = demands.shape
    K = covariates.shape[2]
    out = np.zeros((n, lookback, 1 + K))
    lo = t + 1 - lookback
    src = slice(max(lo, 0), t + 1)
    dst = slice(max(-lo, 0), lookback)
    out[:, dst, 0] = demands[:, src] / scale
    out[:, dst, 1:] = covariates[:, src]
    return out


def critic_state(demands: np.ndarray, t: int, prev_alloc: np.ndarray,
                 lookback: int = LOOKBACK, scale: float = 100.0) -> np.ndarray:
    """``(N, lookback + 1)``: demand history and the VM's current allocation,
    both divided by ``scale``."""
    n, _ = demands.shape
    out = np.zeros((n, lookback + 1))
    lo = t + 1 - lookback
    out[:, max(-lo, 0):lookback] = demands[:, max(lo, 0):t + 1] / scale
    out[:, lookback] = np.asarray(prev_alloc, float) / scale
    return out


def n_window_features(n_covariates: int) -> int:
    return 1 + n_covariates


def training_windows(demands, covariates, t_lo: int, t_hi: int, horizon: int,
                     lookback: int = LOOKBACK, scale: float = 100.0):
    """Stack windows ending at ``t_lo .. t_hi - 1`` with their ``horizon``-step
    targets; returns ``(X, Y)`` of shapes ``(B, L, F)`` and ``(B, horizon)``."""
    xs, ys = [], []
    for t in range(t_lo, t_hi):
        xs.append(forecaster_window(demands, covariates, t, lookback, scale))
        ys.append(demands[:, t + 1:t + 1 + horizon])
    return np.concatenate(xs), np.concatenate(ys)
