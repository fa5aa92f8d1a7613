"""Demand traces: synthetic sinusoids, CSV ingestion and workload schedules."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, TraceFormatError

SINE_KINDS = {
    # kind -> frequency multiplier applied to i*t
    "low": 1.0 / 100.0,
    "high": 100.0,
    "mixed": 1.0,
}
DATASET_ALIASES = {
    "lowfreqsine": "low",
    "low": "low",
    "highfreqsine": "high",
    "high": "high",
    "mixedsine": "mixed",
    "mixed": "mixed",
    "csv": "csv",
}
COVARIATE_PERIODS = (7.0, 28.0)
N_VM_BUCKETS = 4
N_COVARIATES = 1 + 2 * len(COVARIATE_PERIODS) + N_VM_BUCKETS


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DemandTrace:
    """Per-VM demand matrix ``(N, T)`` plus covariates ``(N, T, K)``."""

    demands: np.ndarray
    covariates: np.ndarray
    timestep_duration: str = "12h"

    def __post_init__(self):
        d = _frozen(self.demands)
        if d.ndim != 2:
            raise TraceFormatError(f"demands must be 2-D, got shape {d.shape}")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise TraceFormatError("demands must be finite and non-negative")
        cov = _frozen(self.covariates)
        if cov.ndim != 3 or cov.shape[:2] != d.shape:
            raise TraceFormatError(
                f"covariates shape {cov.shape} does not match demands {d.shape}")
        object.__setattr__(self, "demands", d)
        object.__setattr__(self, "covariates", cov)

    @property
    def n_vms(self) -> int:
        return self.demands.shape[0]

    @property
    def n_steps(self) -> int:
        return self.demands.shape[1]

    def with_demands(self, demands: np.ndarray) -> "DemandTrace":
        return DemandTrace(demands, self.covariates, self.timestep_duration)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    n_vms: int
    horizon_total: int
    csv_path: Optional[str] = None

    def __post_init__(self):
        key = self.kind.lower().replace("_", "").replace("-", "")
        if key not in DATASET_ALIASES:
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")
        if self.n_vms < 1:
            raise ConfigurationError("n_vms must be >= 1")
        if self.horizon_total < 2:
            raise ConfigurationError("horizon_total must be >= 2")
        if DATASET_ALIASES[key] == "csv" and not self.csv_path:
            raise ConfigurationError("csv dataset requires csv_path")

    @property
    def canonical_kind(self) -> str:
        return DATASET_ALIASES[self.kind.lower().replace("_", "").replace("-", "")]


def make_covariates(n_vms: int, t_total: int) -> np.ndarray:
    """Normalized time, sin/cos at two periods and a one-hot VM bucket."""
    t = np.arange(t_total, dtype=float)
    cols = [t / max(t_total, 1)]
    for period in COVARIATE_PERIODS:
        cols.append(np.sin(2 * math.pi * t / period))
        cols.append(np.cos(2 * math.pi * t / period))
    shared = np.stack(cols, axis=-1)  # (T, 5)
    cov = np.zeros((n_vms, t_total, N_COVARIATES))
    cov[:, :, : shared.shape[1]] = shared[None]
    for i in range(n_vms):
        cov[i, :, shared.shape[1] + i % N_VM_BUCKETS] = 1.0
    return cov


def generate_sinusoidal(kind: str, n_vms: int, t_total: int) -> DemandTrace:
    """Demand ``55 + 25 sin(f * i * t)`` for VM ``i = 1..N`` and step ``t = 0..T-1``.

    ``f`` is 1/100 for ``low``, 100 for ``high`` and 1 for ``mixed``.
    """
    key = DATASET_ALIASES.get(kind.lower().replace("_", "").replace("-", ""))
    if key not in SINE_KINDS:
        raise ConfigurationError(f"unknown sinusoid kind {kind!r}")
    if n_vms < 1 or t_total < 1:
        raise ConfigurationError("n_vms and t_total must be >= 1")
    i = np.arange(1, n_vms + 1, dtype=float)[:, None]
    t = np.arange(t_total, dtype=float)[None, :]
    demands = 55.0 + 25.0 * np.sin(SINE_KINDS[key] * i * t)
    return DemandTrace(demands, make_covariates(n_vms, t_total))


def _parse_float(cell: str) -> Optional[float]:
    try:
        return float(cell)
    except ValueError:
        return None


def load_csv_trace(path, n_vms: int) -> DemandTrace:
    """Read a trace with one row per timestep and one column per VM.

    A first row in which no cell parses as a number is treated as a header.
    Ragged rows, non-numeric cells and column-count mismatches are errors;
    nothing is imputed.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise TraceFormatError(f"{path}: empty trace file")
    if all(_parse_float(c) is None for c in rows[0]):
        rows = rows[1:]
        if not rows:
            raise TraceFormatError(f"{path}: header but no data rows")
    values = []
    for lineno, row in enumerate(rows, start=1):
        if len(row) != n_vms:
            raise TraceFormatError(
                f"{path}: row {lineno} has {len(row)} columns, expected {n_vms}")
        parsed = [_parse_float(c) for c in row]
        if any(p is None for p in parsed):
            raise TraceFormatError(f"{path}: non-numeric cell in row {lineno}")
        values.append(parsed)
    demands = np.asarray(values, dtype=float).T
    if np.any(demands < 0) or not np.all(np.isfinite(demands)):
        raise TraceFormatError(f"{path}: demands must be finite and non-negative")
    return DemandTrace(demands, make_covariates(n_vms, demands.shape[1]),
                       timestep_duration="1min")


def make_dataset(spec: DatasetSpec) -> DemandTrace:
    kind = spec.canonical_kind
    if kind == "csv":
        trace = load_csv_trace(spec.csv_path, spec.n_vms)
        if trace.n_steps < spec.horizon_total:
            raise TraceFormatError(
                f"{spec.csv_path}: {trace.n_steps} rows, need {spec.horizon_total}")
        return DemandTrace(trace.demands[:, : spec.horizon_total],
                           trace.covariates[:, : spec.horizon_total],
                           trace.timestep_duration)
    return generate_sinusoidal(kind, spec.n_vms, spec.horizon_total)


WORKLOAD_KINDS = ("burst", "gradual", "cyclic")


@dataclass(frozen=True)
class WorkloadSchedule:
    """Arrival/departure pattern of the VMs.

    Burst VMs are active at every step. Gradual and cyclic patterns begin at
    step ``start`` and the VMs do not exist before it. Gradual arrivals never
    depart. Cyclic VMs are active for half of each
    ``cyclic_period`` and inactive for the other half, with phases staggered
    evenly across VMs.
    """

    kind: str
    n_vms: int
    start: int = 0
    gradual_period: int = 2
    cyclic_period: int = 10
    arrival_step: np.ndarray = field(init=False, repr=False)
    departure_step: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in WORKLOAD_KINDS:
            raise ConfigurationError(f"unknown workload {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.gradual_period < 1 or self.cyclic_period < 2:
            raise ConfigurationError("workload periods must be positive")
        idx = np.arange(self.n_vms)
        if kind == "burst":
            # burst VMs exist for the whole trace; ``start`` only matters for
            # staggered workloads
            arrival = np.zeros(self.n_vms, dtype=int)
        elif kind == "gradual":
            arrival = self.start + idx * self.gradual_period
        else:
            arrival = np.array([self._first_active(i) for i in idx])
        # -1 marks an open-ended stay; cyclic departures repeat (see active_mask)
        departure = np.full(self.n_vms, -1)
        arrival = np.asarray(arrival, dtype=int)
        arrival.setflags(write=False)
        departure.setflags(write=False)
        object.__setattr__(self, "arrival_step", arrival)
        object.__setattr__(self, "departure_step", departure)

    def _phase(self) -> np.ndarray:
        return (np.arange(self.n_vms) * self.cyclic_period) // self.n_vms

    def _cycle_active(self, t: np.ndarray) -> np.ndarray:
        pos = (t[None, :] - self.start + self._phase()[:, None]) % self.cyclic_period
        return pos < self.cyclic_period // 2

    def _first_active(self, i: int) -> int:
        t = np.arange(self.start, self.start + self.cyclic_period)
        return int(t[self._cycle_active(t)[i]][0])

    def active_mask(self, t_total: int) -> np.ndarray:
        """Boolean ``(N, t_total)`` mask of active VM-steps."""
        t = np.arange(t_total)
        mask = t[None, :] >= self.arrival_step[:, None]
        if self.kind == "cyclic":
            mask &= self._cycle_active(t)
        return mask


def apply_workload(trace: DemandTrace, schedule: WorkloadSchedule) -> DemandTrace:
    if schedule.n_vms != trace.n_vms:
        raise ConfigurationError(
            f"schedule has {schedule.n_vms} VMs, trace has {trace.n_vms}")
    mask = schedule.active_mask(trace.n_steps)
    return trace.with_demands(np.where(mask, trace.demands, 0.0))
