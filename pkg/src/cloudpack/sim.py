"""Packing simulator: applies first-step decisions against true demand.

Timeline: ``step`` applies a decision for one period. The state passed in
is the packing of the previous period; the outcome's ``next_state`` is the
packing actually applied (and charged) in this period.

Migrations with ``delay = d > 0`` are queued with ``remaining = d`` and the
VM keeps its previous host and allocation. At the start of every later step
``remaining`` drops by one; the move completes (and is charged) in the step
where it reaches zero. With ``delay = 0`` a move completes immediately.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .milp import CostConfig
from .state import Decision, PackingState, PendingMigration
from .trace import DemandTrace, WorkloadSchedule, apply_workload

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostBreakdown:
    host: float
    migration: float
    throttle: float

    @property
    def total(self) -> float:
        return self.host + self.migration + self.throttle


@dataclass(frozen=True)
class StepOutcome:
    realized_cost: float
    cost_breakdown: CostBreakdown
    next_state: PackingState
    completed_migrations: int = 0
    next_features: Optional[np.ndarray] = None


def _as_decision(proposed) -> Decision:
    if isinstance(proposed, Decision):
        return proposed
    if isinstance(proposed, dict):
        return Decision.from_matrices(proposed["placed"], proposed["alloc"],
                                      proposed["used"])
    raise ContractViolation(f"cannot interpret proposal of type {type(proposed)}")


def step(state: PackingState, proposed, true_demand, delay: int,
         costs: CostConfig, active=None) -> StepOutcome:
    """Apply ``proposed`` for one period with demand ``true_demand``.

    ``active`` marks the VMs present in this period (default: all). Departed
    VMs leave immediately without cost.
    """
    if delay < 0:
        raise ContractViolation("delay must be >= 0")
    dec = _as_decision(proposed)
    n = state.n_vms
    y = np.asarray(true_demand, float)
    if y.shape != (n,) or dec.host.shape != (n,):
        raise ContractViolation("proposal and demand must cover all N VMs")
    active = np.ones(n, bool) if active is None else np.asarray(active, bool)
    C = costs.capacity

    host = state.host.copy()
    alloc = state.alloc.copy()
    frozen = np.zeros(n, bool)
    pending = []
    completed = 0

    # migrations already in flight
    landed = np.zeros(n, bool)
    for m in state.pending:
        if not active[m.vm]:
            continue
        left = m.remaining - 1
        if left <= 0:
            host[m.vm] = m.to_host
            landed[m.vm] = True
            completed += 1
        else:
            pending.append(PendingMigration(m.vm, m.from_host, m.to_host, left))
            frozen[m.vm] = True

    for i in range(n):
        if not active[i]:
            host[i], alloc[i] = -1, 0.0
            continue
        if frozen[i]:
            continue                      # mid-delay: proposal ignored
        want = dec.host[i]
        a = min(max(dec.alloc[i], 0.0), y[i])
        if host[i] < 0:                   # arrival
            host[i] = want
            alloc[i] = a if want >= 0 else 0.0
        elif want == host[i]:
            alloc[i] = a
        elif landed[i] or want < 0:
            # just arrived on its new host, or the proposal drops it: stay
            alloc[i] = min(alloc[i], y[i])
        elif delay == 0:
            host[i], alloc[i] = want, a
            completed += 1
        else:
            pending.append(PendingMigration(i, int(host[i]), int(want), delay))
            frozen[i] = True

    # capacity repair: trim non-frozen allocations, highest VM index first
    for h in range(n):
        on = np.nonzero(host == h)[0]
        excess = alloc[on].sum() - C
        for i in on[::-1]:
            if excess <= 1e-9:
                break
            if frozen[i]:
                continue
            cut = min(alloc[i], excess)
            alloc[i] -= cut
            excess -= cut
        if excess > 1e-9:
            raise ContractViolation(f"host {h} over capacity after repair")

    used = np.zeros(n, bool)
    for i in range(n):
        if host[i] >= 0 and alloc[i] > 0:
            used[host[i]] = True
    unmet = np.where(active, np.maximum(y - alloc, 0.0), 0.0)
    breakdown = CostBreakdown(
        host=costs.host_cost * float(used.sum()),
        migration=costs.migration_cost * completed,
        throttle=costs.unit_throttle * float(unmet.sum()),
    )
    nxt = PackingState(host, alloc, used, tuple(pending), state.timestep + 1)
    return StepOutcome(breakdown.total, breakdown, nxt, completed)


@dataclass
class StepRecord:
    t: int
    host_cost: float
    migr_cost: float
    throttle_cost: float
    cumulative: float


@dataclass
class EpisodeReport:
    records: list = field(default_factory=list)
    error: Optional[str] = None
    meta: dict = field(default_factory=dict)

    @property
    def cumulative_regret(self) -> float:
        return self.records[-1].cumulative if self.records else 0.0

    @property
    def complete(self) -> bool:
        return self.error is None

    def totals(self) -> dict:
        return {
            "host": float(sum(r.host_cost for r in self.records)),
            "migration": float(sum(r.migr_cost for r in self.records)),
            "throttle": float(sum(r.throttle_cost for r in self.records)),
        }

    def to_json(self) -> str:
        return json.dumps({"records": [asdict(r) for r in self.records],
                           "error": self.error, "meta": self.meta},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EpisodeReport":
        d = json.loads(text)
        return cls([StepRecord(**r) for r in d["records"]], d.get("error"),
                   d.get("meta", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "host_cost", "migr_cost", "throttle_cost", "cumulative"])
        for r in self.records:
            w.writerow([r.t, repr(r.host_cost), repr(r.migr_cost),
                        repr(r.throttle_cost), repr(r.cumulative)])
        return buf.getvalue()

    def save(self, stem) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".json").write_text(self.to_json(), encoding="utf-8")
        stem.with_suffix(".csv").write_text(self.to_csv(), encoding="utf-8")


@dataclass(frozen=True)
class Observation:
    """What a policy may see when deciding the packing for period ``t + 1``."""

    t: int
    state: PackingState
    history: DemandTrace          # demands and covariates up to and including t
    covariates_ahead: np.ndarray  # (N, H_max, K) known covariates after t
    active_next: np.ndarray       # VMs present in period t + 1


Policy = Callable[[Observation], Decision]


def run_episode(policy: Policy, trace: DemandTrace, schedule: Optional[WorkloadSchedule],
                delay: int, steps: int, costs: CostConfig, start: int = 0,
                horizon: int = 1, on_step: Optional[Callable] = None) -> EpisodeReport:
    """Simulate ``steps`` periods, deciding period ``t + 1`` at time ``t`` for
    ``t = start, ..., start + steps - 1``.

    ``policy`` must not read beyond ``observation.history``; oracle policies
    hold the trace themselves. A policy exception ends the episode with a
    partial report.
    """
    T = trace.n_steps
    if start + steps + horizon > T:
        raise ContractViolation(
            f"episode needs {start + steps + horizon} timesteps, trace has {T}")
    if schedule is not None:
        mask = schedule.active_mask(T)
        trace = apply_workload(trace, schedule)
    else:
        mask = np.ones((trace.n_vms, T), bool)
    state = PackingState.empty(trace.n_vms, timestep=start)
    report = EpisodeReport(meta={"start": start, "steps": steps, "delay": delay})
    total = 0.0
    for k in range(steps):
        t = start + k
        obs = Observation(
            t=t, state=state,
            history=DemandTrace(trace.demands[:, :t + 1], trace.covariates[:, :t + 1],
                                trace.timestep_duration),
            covariates_ahead=trace.covariates[:, t + 1:t + 1 + horizon],
            active_next=mask[:, t + 1].copy(),
        )
        try:
            decision = policy(obs)
            out = step(state, decision, trace.demands[:, t + 1], delay, costs,
                       active=mask[:, t + 1])
        except Exception as exc:  # noqa: BLE001 - report and stop
            log.error("episode aborted at t=%d: %s", t, exc)
            report.error = f"t={t}: {type(exc).__name__}: {exc}"
            break
        total += out.realized_cost
        b = out.cost_breakdown
        report.records.append(StepRecord(t + 1, b.host, b.migration, b.throttle, total))
        if on_step is not None:
            on_step(obs, decision, out)
        state = out.next_state
    return report


def check_capacity(state: PackingState, capacity: int, tol: float = 1e-9) -> bool:
    return bool(np.all(state.host_load() <= capacity + tol))


def per_step_costs(report: EpisodeReport) -> Sequence[float]:
    return [r.host_cost + r.migr_cost + r.throttle_cost for r in report.records]
