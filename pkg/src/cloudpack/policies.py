"""Decision policies for :func:`cloudpack.sim.run_episode`: model predictive
control over a forecast (learned or oracle) and the heuristic packers."""
from __future__ import annotations

import logging
from typing import Callable, Optional

import numpy as np

from .features import LOOKBACK, forecaster_window
from .milp import CostConfig, build_instance, sparsify
from .sim import Observation
from .solve import solve_milp
from .state import Decision

log = logging.getLogger(__name__)

ForecastFn = Callable[[Observation, int], np.ndarray]


class ModelForecast:
    """Median forecast of a :class:`~cloudpack.nn.Forecaster` for the next
    ``horizon`` steps."""

    def __init__(self, model, lookback: int = LOOKBACK):
        self.model = model
        self.lookback = lookback

    def __call__(self, obs: Observation, horizon: int) -> np.ndarray:
        if horizon > self.model.horizon:
            raise ValueError(f"model predicts {self.model.horizon} steps, "
                             f"{horizon} requested")
        h = obs.history
        x = forecaster_window(h.demands, h.covariates, obs.t, self.lookback,
                              self.model.scale)
        out = self.model(x).value[:, :horizon, self.model.median_index()]
        return np.maximum(out, 0.0)


class OracleForecast:
    """Perfect foresight: the true demand of the trace the episode runs on."""

    def __init__(self, demands: np.ndarray):
        self.demands = np.asarray(demands, float)

    def __call__(self, obs: Observation, horizon: int) -> np.ndarray:
        return self.demands[:, obs.t + 1:obs.t + 1 + horizon].copy()


class MpcPolicy:
    """Receding horizon control: forecast ``horizon`` steps, solve the MILP
    of the given flavor from the current state, apply its first step.

    Future arrivals are not known to the controller: VMs present in the next
    period are treated as present for the whole horizon.
    """

    def __init__(self, forecast: ForecastFn, flavor: str, costs: CostConfig,
                 horizon: int, backend: str = "highs",
                 movable_budget: Optional[int] = None):
        self.forecast = forecast
        self.flavor = flavor
        self.costs = costs
        self.horizon = horizon
        self.backend = backend
        self.movable_budget = movable_budget
        self.last_solution = None
        self.last_instance = None

    def __call__(self, obs: Observation) -> Decision:
        yhat = self.forecast(obs, self.horizon)
        active = np.repeat(obs.active_next[:, None], self.horizon, axis=1)
        yhat = np.where(active, yhat, 0.0)
        inst = build_instance(self.flavor, yhat, obs.state, self.costs, active)
        if self.movable_budget is not None:
            inst = sparsify(inst, obs.state, self.movable_budget)
        sol = solve_milp(inst, backend=self.backend)
        if sol.values is None:
            raise RuntimeError(f"MILP failed at t={obs.t}: {sol.status.value}")
        self.last_instance, self.last_solution = inst, sol
        return inst.first_step(sol.values)
