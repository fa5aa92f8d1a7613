"""Two-stage forecaster training and predict-and-optimize (PnO).

PnO trains the forecaster on the regret of the decisions its forecasts
induce. The regret gradient with respect to the forecast comes from one of
four methods: SPO and QPTL on the soft MILP, hcSPO and hcQPTL on the hard
MILP. It is pushed into the network through the surrogate
``sum(g * yhat)``, whose gradient in the parameters is ``g . dyhat/domega``.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, SolverError
from .features import LOOKBACK, forecaster_window, training_windows
from .milp import (CostConfig, MilpInstance, build_instance, forecast_sensitivity,
                   qp_relax, regret_coefficients)
from .nn import Adam, Tensor, quantile_loss
from .nn import checkpoint
from .sim import step as sim_step
from .solve import solve_kkt_system, solve_milp, solve_qp
from .state import PackingState
from .trace import DemandTrace, WorkloadSchedule, apply_workload

log = logging.getLogger(__name__)

METHOD_FLAVOR = {"spo": "soft", "qptl": "soft", "hcspo": "hard", "hcqptl": "hard"}


@dataclass(frozen=True)
class RegretGradMethod:
    kind: str
    penalty: float = 0.01

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in METHOD_FLAVOR:
            raise ConfigurationError(f"unknown regret-gradient method {self.kind!r}")
        if self.penalty <= 0:
            raise ConfigurationError("QP penalty must be positive")
        object.__setattr__(self, "kind", kind)

    @property
    def flavor(self) -> str:
        return METHOD_FLAVOR[self.kind]

    @property
    def uses_qp(self) -> bool:
        return self.kind.endswith("qptl")


@dataclass
class RegretRecord:
    regret: float
    grad_wrt_forecast: np.ndarray           # (N, H)
    grad_wrt_params: Optional[np.ndarray] = None


def regret(instance: MilpInstance, solution, true_demand) -> float:
    """Cost of the instance's decision at the true demand over the horizon.

    ``solution`` is a :class:`~cloudpack.solve.MilpSolution` or a decision
    vector. The soft flavor includes its multiplier term at ``true_demand``.
    """
    v = getattr(solution, "values", solution)
    if v is None:
        raise SolverError("solution has no values")
    return instance.evaluate(np.asarray(v, float), true_demand)


def realized_regret(instance: MilpInstance, solution, true_demand) -> float:
    """Horizon cost of the decision as the simulator would charge it: hosts,
    migrations, and throttling floored at zero per VM-step.

    Unlike :func:`regret` this is bounded below by the host and migration
    cost; the signed throttle of the model rewards allocation above demand.
    """
    v = np.asarray(getattr(solution, "values", solution), float)
    parts = instance.unpack(v)
    y = np.where(instance.active, np.asarray(true_demand, float), 0.0)
    c = instance.costs
    short = np.maximum(y - parts["alloc"].sum(axis=1), 0.0)
    return float(c.host_cost * parts["used"].sum()
                 + c.migration_cost / 2 * parts["migr"].sum()
                 + c.unit_throttle * short.sum())


def _solve(inst: MilpInstance, backend: str) -> np.ndarray:
    sol = solve_milp(inst, backend=backend)
    if sol.values is None:
        raise SolverError(f"{inst.flavor} MILP failed: {sol.status.value}")
    return sol.values


def spo_gradient(true_demand, forecast, flavor: str, prev_state: Optional[PackingState],
                 costs: CostConfig, active=None, backend: str = "highs",
                 cache: Optional[dict] = None) -> np.ndarray:
    """SPO subgradient ``v*(y) - v*(2 yhat - y)`` carried to forecast space.

    Each decision is mapped through :func:`~cloudpack.milp.forecast_sensitivity`,
    the derivative of the instance's objective in the forecast at that
    decision. Negative entries of ``2 yhat - y`` are clamped to zero.
    ``cache`` memoizes the true-demand term, which training revisits.
    """
    y = np.asarray(true_demand, float)
    yhat = np.asarray(forecast, float)
    perturbed = np.maximum(2.0 * yhat - y, 0.0)

    def sensitivity(d):
        inst = build_instance(flavor, d, prev_state, costs, active)
        return forecast_sensitivity(inst, _solve(inst, backend))

    if cache is None:
        s_y = sensitivity(y)
    else:
        host = None if prev_state is None else prev_state.host.tobytes()
        act = None if active is None else np.asarray(active, bool).tobytes()
        key = (flavor, y.shape, y.tobytes(), host, act)
        if key not in cache:
            cache[key] = sensitivity(y)
        s_y = cache[key]
    return s_y - sensitivity(perturbed)


def qptl_gradient(true_demand, forecast, flavor: str, prev_state: Optional[PackingState],
                  costs: CostConfig, penalty: float = 0.01, active=None,
                  return_regret: bool = False):
    """Exact gradient of the QP-relaxed regret in the forecast.

    The relaxation's solution is differentiated through its KKT conditions;
    for the hard flavor this includes the derivative of the forecast-dependent
    rows. Returns ``(N, H)``, or ``(grad, relaxed_regret)``.
    """
    y = np.asarray(true_demand, float)
    inst = build_instance(flavor, forecast, prev_state, costs, active)
    qp = qp_relax(inst, penalty)
    sol = solve_qp(qp)
    if not sol.success:
        raise SolverError(f"QP relaxation failed: {sol.status.value}")
    jac = solve_kkt_system(sol, qp)
    if jac.regularized:
        log.debug("KKT system singular (%d weakly active rows), min-norm solve",
                  jac.n_weakly_active)
    g = (regret_coefficients(inst, y) @ jac.dv).reshape(inst.forecast.shape)
    if return_regret:
        return g, inst.evaluate(sol.values, y)
    return g


def forecast_gradient(method: RegretGradMethod, true_demand, forecast, prev_state,
                      costs: CostConfig, active=None, backend: str = "highs",
                      cache: Optional[dict] = None) -> np.ndarray:
    if method.uses_qp:
        return qptl_gradient(true_demand, forecast, method.flavor, prev_state, costs,
                             method.penalty, active)
    return spo_gradient(true_demand, forecast, method.flavor, prev_state, costs,
                        active, backend, cache)


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    """Shared training settings.

    Decision times run over ``t_start + 1 .. t_start + t0 - 1`` (``t0 - 1``
    steps per epoch); two-stage windows end at ``t_start .. t_start + t0 - 1``.
    """
    epochs: int = 50
    lr: float = 1e-3
    t_start: int = 0
    t0: int = 50
    lookback: int = LOOKBACK
    costs: CostConfig = field(default_factory=CostConfig)
    backend: str = "highs"
    log_path: Optional[str] = None
    checkpoint_path: Optional[str] = None


class _CsvLog:
    def __init__(self, path, columns):
        self.rows = []
        self.path = Path(path) if path else None
        self.columns = columns

    def add(self, *values):
        self.rows.append(values)

    def flush(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.columns)
            w.writerows(self.rows)


def _prepare(dataset: DemandTrace, schedule: Optional[WorkloadSchedule]):
    if schedule is None:
        return dataset, np.ones(dataset.demands.shape, bool)
    return apply_workload(dataset, schedule), schedule.active_mask(dataset.n_steps)


def train_two_stage(model, dataset: DemandTrace, config: TrainConfig,
                    schedule: Optional[WorkloadSchedule] = None):
    """Fit the forecaster's quantile heads by full-batch pinball loss.

    The head bias starts at the mean training target so that the first
    epochs are not spent moving the output scale.
    """
    trace, _ = _prepare(dataset, schedule)
    H = model.horizon
    hi = config.t_start + config.t0
    if hi + H > trace.n_steps:
        raise ConfigurationError("trace too short for the training window")
    X, Y = training_windows(trace.demands, trace.covariates, config.t_start, hi, H,
                            config.lookback, model.scale)
    if len(X) == 0:
        raise ConfigurationError("empty training set")
    nq = len(model.quantiles)
    b = model.head.b.value.reshape(H, nq)
    b[:] = Y.mean() / model.scale
    model.head.b.value = b.reshape(-1)
    opt = Adam(model, config.lr)
    logger = _CsvLog(config.log_path, ["epoch", "loss", "wall_time"])
    t_begin = time.perf_counter()
    denom = Y.size
    for epoch in range(config.epochs):
        model.zero_grad()
        out = model(X)
        loss = None
        for k, q in enumerate(model.quantiles):
            term = quantile_loss(out[:, :, k], Y, q)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / denom)
        val = float(loss.value)
        if not np.isfinite(val):
            logger.flush()
            raise FloatingPointError(f"two-stage loss diverged at epoch {epoch}")
        loss.backward()
        opt.step()
        model.check_finite()
        logger.add(epoch, val, round(time.perf_counter() - t_begin, 3))
    logger.flush()
    if config.checkpoint_path:
        checkpoint.save(model, config.checkpoint_path)
    return model


def forecast_tensor(model, trace: DemandTrace, t: int, horizon: int,
                    lookback: int = LOOKBACK) -> Tensor:
    """Median forecast for steps ``t+1 .. t+horizon`` as an ``(N, horizon)``
    tensor attached to the model's graph."""
    x = forecaster_window(trace.demands, trace.covariates, t, lookback, model.scale)
    return model(x)[:, :horizon, model.median_index()]


def param_gradient(model, yhat: Tensor, g: np.ndarray) -> np.ndarray:
    """``g . dyhat/domega`` as a flat vector (the model's grads are reset)."""
    model.zero_grad()
    (yhat * g).sum().backward()
    out = model.flat_grad()
    model.zero_grad()
    return out


@dataclass
class StepResult:
    """One training decision: forecast, MILP decision and regret feedback."""
    yhat: Tensor
    instance: MilpInstance
    values: np.ndarray
    regret: float
    realized: float
    grad_forecast: np.ndarray
    next_state: PackingState


def decision_step(model, trace: DemandTrace, mask: np.ndarray, t: int,
                  state: PackingState, method: RegretGradMethod, horizon: int,
                  config: TrainConfig, cache: Optional[dict] = None) -> StepResult:
    """Forecast at ``t``, solve the method's MILP, score it and compute the
    regret gradient; the first step is applied at delay 0 to get the next
    state."""
    costs = config.costs
    yhat = forecast_tensor(model, trace, t, horizon, config.lookback)
    active = mask[:, t + 1:t + 1 + horizon]
    y = trace.demands[:, t + 1:t + 1 + horizon]
    f = np.where(active, np.maximum(yhat.value, 0.0), 0.0)
    inst = build_instance(method.flavor, f, state, costs, active)
    v = _solve(inst, config.backend)
    g = forecast_gradient(method, y, f, state, costs, active, config.backend, cache)
    out = sim_step(state, inst.first_step(v), y[:, 0], 0, costs, active=active[:, 0])
    return StepResult(yhat, inst, v, regret(inst, v, y), realized_regret(inst, v, y),
                      g, out.next_state)


def train_pno(model, dataset: DemandTrace, method: RegretGradMethod, horizon: int,
              config: TrainConfig, schedule: Optional[WorkloadSchedule] = None):
    """Fine-tune a (warmstarted) forecaster on the regret over ``horizon``.

    Every decision time does one Adam step. The packing state rolls forward
    through the simulator at delay 0 from an empty start each epoch. A
    failed solve is logged and the step skipped (the state is then reset).
    """
    if horizon < 2:
        raise ConfigurationError("PnO horizon must be at least 2")
    if horizon > model.horizon:
        raise ConfigurationError(f"model predicts {model.horizon} steps, horizon {horizon}")
    trace, mask = _prepare(dataset, schedule)
    lo, hi = config.t_start + 1, config.t_start + config.t0
    if hi + horizon > trace.n_steps:
        raise ConfigurationError("trace too short for the training window")
    opt = Adam(model, config.lr)
    logger = _CsvLog(config.log_path, ["epoch", "regret", "realized", "skipped",
                                       "wall_time"])
    t_begin = time.perf_counter()
    cache = {}
    for epoch in range(config.epochs):
        state = PackingState.empty(trace.n_vms, timestep=lo)
        total, real, skipped = 0.0, 0.0, 0
        for t in range(lo, hi):
            try:
                res = decision_step(model, trace, mask, t, state, method, horizon,
                                    config, cache)
            except SolverError as exc:
                log.warning("epoch %d t=%d skipped: %s", epoch, t, exc)
                skipped += 1
                state = PackingState.empty(trace.n_vms, timestep=t + 1)
                continue
            total += res.regret
            real += res.realized
            opt.step(param_gradient(model, res.yhat, res.grad_forecast))
            model.check_finite()
            state = res.next_state
        logger.add(epoch, total, real, skipped, round(time.perf_counter() - t_begin, 3))
    logger.flush()
    if config.checkpoint_path:
        checkpoint.save(model, config.checkpoint_path)
    return model
