"""Experiment matrix: train the requested forecasters per dataset, workload
and seed, evaluate every method under every migration delay, and emit the
regret table.

Methods are given as strings:

    two_stage:H[:flavor]   quantile-trained forecaster + MPC over H
    pno:KIND:H             PnO fine-tuned forecaster (KIND in spo, hcspo, qptl, hcqptl)
    pnc:KIND               PnC actor, evaluated with the two-step MILP
    oracle:FLAVOR:H        MPC over true future demand
    first_fit, best_fit    online heuristics
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .errors import ConfigurationError
from .features import LOOKBACK, n_window_features
from .heur import HEURISTICS, HeuristicPolicy
from .milp import FLAVORS, CostConfig
from .nn import Critic, Forecaster, checkpoint
from .pnc import PncConfig, train_pnc
from .pno import METHOD_FLAVOR, RegretGradMethod, TrainConfig, train_pno, train_two_stage
from .policies import ModelForecast, MpcPolicy, OracleForecast
from .sim import EpisodeReport, StepRecord, run_episode
from .trace import N_COVARIATES, DatasetSpec, WorkloadSchedule, make_dataset

log = logging.getLogger(__name__)

DELAYS = (0, 2, 5)
EVAL_STEPS = 25

DESK_SCALE = {"n_vms": 3, "t0": 20, "epochs": 50, "layers": 2, "hidden": 32, "lr": 3e-3}
FULL_SCALE = {"n_vms": 10, "t0": 50, "epochs": 10_000, "layers": 5, "hidden": 100}


@dataclass(frozen=True)
class MethodSpec:
    family: str                 # two_stage, pno, pnc, oracle, heuristic
    kind: str = ""              # regret-gradient kind, MILP flavor or heuristic
    horizon: int = 0

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        parts = text.strip().lower().split(":")
        fam = parts[0].replace("-", "_")
        try:
            if fam in HEURISTICS and len(parts) == 1:
                return cls("heuristic", fam, 0)
            if fam == "two_stage" and len(parts) in (2, 3):
                flavor = parts[2] if len(parts) == 3 else "hard"
                spec = cls(fam, flavor, int(parts[1]))
            elif fam == "pno" and len(parts) == 3:
                spec = cls(fam, parts[1], int(parts[2]))
            elif fam == "pnc" and len(parts) == 2:
                spec = cls(fam, parts[1], 2)
            elif fam == "oracle" and len(parts) == 3:
                spec = cls(fam, parts[1], int(parts[2]))
            else:
                raise ConfigurationError(f"cannot parse method {text!r}")
        except ValueError as exc:
            raise ConfigurationError(f"bad horizon in method {text!r}") from exc
        if spec.family in ("pno", "pnc") and spec.kind not in METHOD_FLAVOR:
            raise ConfigurationError(f"unknown PnO/PnC kind in {text!r}")
        if spec.family in ("two_stage", "oracle") and spec.kind not in FLAVORS:
            raise ConfigurationError(f"unknown MILP flavor in {text!r}")
        if spec.horizon < 1 or (spec.family == "pno" and spec.horizon < 2):
            raise ConfigurationError(f"horizon too small in {text!r}")
        return spec

    @property
    def label(self) -> str:
        if self.family == "heuristic":
            return self.kind
        if self.family == "pnc":
            return f"pnc:{self.kind}"
        return f"{self.family}:{self.kind}:{self.horizon}"

    @property
    def needs_model(self) -> bool:
        return self.family in ("two_stage", "pno", "pnc")


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    out_dir: str = "runs"
    seeds: List[int] = field(default_factory=lambda: [0])
    datasets: List[dict] = field(default_factory=lambda: [{"kind": "mixed"}])
    workloads: List[str] = field(default_factory=lambda: ["burst"])
    delays: List[int] = field(default_factory=lambda: [0])
    methods: List[str] = field(default_factory=lambda: ["best_fit"])
    n_vms: int = 10
    t0: int = 50
    epochs: int = 10_000
    layers: int = 5
    hidden: int = 100
    lr: float = 1e-3
    eval_steps: int = EVAL_STEPS
    lookback: int = LOOKBACK
    costs: dict = field(default_factory=dict)
    pnc: dict = field(default_factory=dict)
    qp_penalty: float = 0.01
    movable_budget: Optional[int] = None
    backend: str = "highs"
    jobs: int = 1

    @classmethod
    def from_dict(cls, d: dict, desk_scale: bool = False) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        base = dict(DESK_SCALE) if desk_scale else {}
        base.update(d)
        cfg = cls(**base)
        cfg.validate()
        return cfg

    def validate(self):
        self.method_specs()
        for dly in self.delays:
            if dly < 0:
                raise ConfigurationError("delays must be non-negative")
        for w in self.workloads:
            WorkloadSchedule(w, 1)
        for d in self.datasets:
            self.dataset_spec(d)
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.t0 < 2 or self.eval_steps < 1 or self.epochs < 0:
            raise ConfigurationError("t0 >= 2, eval_steps >= 1 and epochs >= 0 required")
        CostConfig(**self.costs)
        PncConfig(**self.pnc)
        if self.jobs < 1:
            raise ConfigurationError("jobs must be positive")

    def method_specs(self) -> List[MethodSpec]:
        if not self.methods:
            raise ConfigurationError("no methods configured")
        specs = [MethodSpec.parse(m) for m in self.methods]
        labels = [s.label for s in specs]
        if len(set(labels)) != len(labels):
            raise ConfigurationError("duplicate methods")
        return specs

    @property
    def max_horizon(self) -> int:
        return max([2] + [s.horizon for s in self.method_specs()])

    # timeline: lookback | training t0 | gap | evaluation
    @property
    def t_start(self) -> int:
        return self.lookback

    @property
    def eval_start(self) -> int:
        return self.t_start + self.t0 + self.max_horizon

    @property
    def t_total(self) -> int:
        return self.eval_start + self.eval_steps + self.max_horizon + 1

    def dataset_spec(self, d: dict) -> DatasetSpec:
        d = dict(d)
        return DatasetSpec(kind=d.pop("kind"), n_vms=d.pop("n_vms", self.n_vms),
                           horizon_total=self.t_total, csv_path=d.pop("csv_path", None))

    def dataset_label(self, d: dict) -> str:
        return d.get("name") or self.dataset_spec(d).canonical_kind

    def to_dict(self) -> dict:
        return asdict(self)


def column_label(dataset: str, workload: str, delay: int) -> str:
    return f"{dataset}/{workload}/d{delay}"


# -- one training/evaluation unit ------------------------------------------

@dataclass
class UnitResult:
    """Episodes of every method and delay for one (dataset, workload, seed)."""
    dataset: str
    workload: str
    seed: int
    episodes: Dict[Tuple[str, int], dict] = field(default_factory=dict)
    error: Optional[str] = None


def _schedule(kind: str, n: int, start: int) -> WorkloadSchedule:
    return WorkloadSchedule(kind, n, start=start)


def _run_unit(cfg: ExperimentConfig, dataset: dict, workload: str, seed: int,
              run_dir: str) -> UnitResult:
    dlabel = cfg.dataset_label(dataset)
    res = UnitResult(dlabel, workload, seed)
    try:
        spec = cfg.dataset_spec(dataset)
        trace = make_dataset(spec)
        n = trace.n_vms
        costs = CostConfig(**cfg.costs)
        specs = cfg.method_specs()
        ck = Path(run_dir) / "checkpoints" / f"{dlabel}_{workload}_s{seed}"
        logs = Path(run_dir) / "logs" / f"{dlabel}_{workload}_s{seed}"
        train_sched = _schedule(workload, n, cfg.t_start + 1)
        eval_sched = _schedule(workload, n, cfg.eval_start + 1)

        def train_cfg(name: str) -> TrainConfig:
            return TrainConfig(epochs=cfg.epochs, lr=cfg.lr, t_start=cfg.t_start,
                               t0=cfg.t0, lookback=cfg.lookback, costs=costs,
                               backend=cfg.backend, log_path=str(logs / f"{name}.csv"),
                               checkpoint_path=str(ck / f"{name}.json"))

        models = {}
        if any(s.needs_model for s in specs):
            base = Forecaster(n_window_features(N_COVARIATES), cfg.max_horizon,
                              n_layers=cfg.layers, hidden=cfg.hidden, seed=seed)
            models["two_stage"] = train_two_stage(base, trace, train_cfg("two_stage"),
                                                  train_sched)
        for s in specs:
            if s.family == "pno":
                m = checkpoint.copy_module(models["two_stage"])
                method = RegretGradMethod(s.kind, cfg.qp_penalty)
                models[s.label] = train_pno(m, trace, method, s.horizon,
                                            train_cfg(f"pno_{s.kind}_h{s.horizon}"),
                                            train_sched)
            elif s.family == "pnc":
                actor = checkpoint.copy_module(models["two_stage"])
                critic = Critic(cfg.lookback + 1, n, seed=seed + 1000)
                pcfg = PncConfig(**{**cfg.pnc, "seed": seed})
                tc = train_cfg(f"pnc_{s.kind}")
                tc.checkpoint_path = str(ck / f"pnc_{s.kind}")
                train_pnc(actor, critic, trace, RegretGradMethod(s.kind, cfg.qp_penalty),
                          pcfg, tc, train_sched)
                models[s.label] = actor

        for s in specs:
            for delay in cfg.delays:
                policy = _policy(s, models, trace, costs, cfg)
                rep = run_episode(policy, trace, eval_sched, delay, cfg.eval_steps, costs,
                                  start=cfg.eval_start, horizon=max(s.horizon, 1))
                rep.meta.update({"method": s.label, "dataset": dlabel,
                                 "workload": workload, "seed": seed})
                res.episodes[(s.label, delay)] = json.loads(rep.to_json())
    except Exception as exc:  # noqa: BLE001 - reported as a failed unit
        log.exception("unit %s/%s seed %d failed", dlabel, workload, seed)
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def _policy(s: MethodSpec, models, trace, costs, cfg):
    if s.family == "heuristic":
        return HeuristicPolicy(s.kind, trace, costs.capacity)
    if s.family == "oracle":
        return MpcPolicy(OracleForecast(trace.demands), s.kind, costs, s.horizon,
                         cfg.backend, cfg.movable_budget)
    if s.family == "two_stage":
        return MpcPolicy(ModelForecast(models["two_stage"], cfg.lookback), s.kind,
                         costs, s.horizon, cfg.backend, cfg.movable_budget)
    return MpcPolicy(ModelForecast(models[s.label], cfg.lookback),
                     METHOD_FLAVOR[s.kind], costs, s.horizon, cfg.backend,
                     cfg.movable_budget)


# -- report ------------------------------------------------------------------

@dataclass
class ReportBundle:
    rows: List[str] = field(default_factory=list)
    columns: List[str] = field(default_factory=list)
    # (row, column) -> [(seed, report)]
    cells: Dict[Tuple[str, str], List[Tuple[int, EpisodeReport]]] = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)
    run_id: str = ""

    @property
    def failed(self) -> bool:
        if self.errors:
            return True
        return any(rep.error for reps in self.cells.values() for _, rep in reps)

    def cell_stats(self, row: str, col: str) -> Optional[Tuple[float, float, int]]:
        reps = [r for _, r in self.cells.get((row, col), []) if r.error is None]
        if not reps:
            return None
        vals = [r.cumulative_regret for r in reps]
        std = statistics.stdev(vals) if len(vals) > 1 else math.nan
        return statistics.fmean(vals), std, len(vals)


def episode_stem(dataset: str, workload: str, delay: int, method: str, seed: int) -> str:
    return f"{dataset}_{workload}_d{delay}_{method.replace(':', '-')}_s{seed}"


def assemble(cfg: ExperimentConfig, units: List[UnitResult]) -> ReportBundle:
    bundle = ReportBundle(rows=[s.label for s in cfg.method_specs()], run_id=cfg.run_id)
    for d in cfg.datasets:
        for w in cfg.workloads:
            for dly in cfg.delays:
                bundle.columns.append(column_label(cfg.dataset_label(d), w, dly))
    for u in sorted(units, key=lambda u: (u.dataset, u.workload, u.seed)):
        if u.error:
            bundle.errors.append(f"{u.dataset}/{u.workload}/s{u.seed}: {u.error}")
            continue
        for (label, delay), ep in sorted(u.episodes.items()):
            rep = EpisodeReport([StepRecord(**r) for r in ep["records"]], ep["error"],
                                ep["meta"])
            key = (label, column_label(u.dataset, u.workload, delay))
            bundle.cells.setdefault(key, []).append((u.seed, rep))
    return bundle


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.2f}"


def table_csv(bundle: ReportBundle) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + bundle.columns)
    for row in bundle.rows:
        cells = []
        for col in bundle.columns:
            st = bundle.cell_stats(row, col)
            cells.append("" if st is None else f"{_fmt(st[0])} ± {_fmt(st[1])}")
        w.writerow([row] + cells)
    return buf.getvalue()


def table_json(bundle: ReportBundle) -> dict:
    cells = []
    for (row, col), reps in sorted(bundle.cells.items()):
        st = bundle.cell_stats(row, col)
        cells.append({
            "method": row, "column": col,
            "mean": None if st is None else st[0],
            "std": None if st is None or math.isnan(st[1]) else st[1],
            "n": 0 if st is None else st[2],
            "episodes": [{"seed": seed, "file": f"episodes/{episode_stem(*_split(col), row, seed)}.csv",
                          "report": json.loads(rep.to_json())} for seed, rep in reps],
        })
    return {"run_id": bundle.run_id, "rows": bundle.rows, "columns": bundle.columns,
            "cells": cells, "errors": bundle.errors}


def _split(col: str) -> Tuple[str, str, int]:
    dataset, workload, d = col.rsplit("/", 2)
    return dataset, workload, int(d[1:])


def load_table_json(text: str) -> ReportBundle:
    d = json.loads(text)
    bundle = ReportBundle(rows=d["rows"], columns=d["columns"], errors=d["errors"],
                          run_id=d.get("run_id", ""))
    for c in d["cells"]:
        bundle.cells[(c["method"], c["column"])] = [
            (e["seed"], EpisodeReport.from_json(json.dumps(e["report"])))
            for e in c["episodes"]]
    return bundle


def emit_report(bundle: ReportBundle, run_dir) -> Path:
    """Write ``table.csv``, ``table.json`` and one CSV per episode."""
    run_dir = Path(run_dir)
    (run_dir / "episodes").mkdir(parents=True, exist_ok=True)
    for (row, col), reps in sorted(bundle.cells.items()):
        for seed, rep in reps:
            stem = episode_stem(*_split(col), row, seed)
            (run_dir / "episodes" / f"{stem}.csv").write_text(rep.to_csv(), encoding="utf-8")
    (run_dir / "table.csv").write_text(table_csv(bundle), encoding="utf-8")
    (run_dir / "table.json").write_text(
        json.dumps(table_json(bundle), indent=2, sort_keys=True), encoding="utf-8")
    return run_dir


def run_experiment(cfg: ExperimentConfig) -> ReportBundle:
    """Train and evaluate every (dataset, workload, seed) unit and write the
    run directory. Units run in parallel processes when ``cfg.jobs > 1``."""
    cfg.validate()
    run_dir = Path(cfg.out_dir) / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    todo = [(d, w, s) for d in cfg.datasets for w in cfg.workloads for s in cfg.seeds]
    if cfg.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            futures = [ex.submit(_run_unit, cfg, d, w, s, str(run_dir)) for d, w, s in todo]
            units = [f.result() for f in futures]
    else:
        units = [_run_unit(cfg, d, w, s, str(run_dir)) for d, w, s in todo]
    bundle = assemble(cfg, units)
    emit_report(bundle, run_dir)
    return bundle
