"""MILP formulations of the VM packing problem over a forecast horizon.

Three flavors share the same decision variables and fixed constraints:

* ``primary`` - host, migration and throttling costs only;
* ``soft``    - adds ``sum lambda * (alloc - yhat * placed)`` to the objective;
* ``hard``    - adds ``alloc <= yhat * placed`` as inequality rows.

Throttling is not materialized as a variable: it is substituted into the
objective as ``(th/C) * (yhat - sum_h alloc)``, which leaves the constant
``c(yhat) = (th/C) * sum(yhat)`` and a coefficient ``-th/C`` on every alloc.

Step ``k`` of the horizon decides the packing serving demand ``yhat[:, k]``.
The migration rows of step 0 link the placement to ``prev_state``; VMs that
were not placed before (arrivals) are packed without migration cost. VMs
marked inactive at a step have all their variables fixed to zero and take
no part in the single-placement equality.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation, ConfigurationError
from .state import Decision, PackingState

FLAVORS = ("primary", "soft", "hard")


@dataclass(frozen=True)
class CostConfig:
    host_cost: float = 100.0
    migration_cost: float = 10.0
    throttle_cost: float = 1000.0
    capacity: int = 100
    max_migrations: int = 1
    soft_multipliers: Optional[np.ndarray] = None

    def __post_init__(self):
        if min(self.host_cost, self.migration_cost, self.throttle_cost) < 0:
            raise ConfigurationError("costs must be non-negative")
        if self.capacity < 1:
            raise ConfigurationError("capacity must be >= 1")
        if self.max_migrations < 0:
            raise ConfigurationError("max_migrations must be >= 0")

    @property
    def unit_throttle(self) -> float:
        """Cost per throttled resource unit, ``th/C``."""
        return self.throttle_cost / self.capacity

    def multipliers(self, n_vms: int, horizon: int) -> np.ndarray:
        """Soft-constraint weights ``lambda[i, h, t]``; defaults to ``th/C``."""
        if self.soft_multipliers is None:
            return np.full((n_vms, n_vms, horizon), self.unit_throttle)
        lam = np.broadcast_to(np.asarray(self.soft_multipliers, float),
                              (n_vms, n_vms, horizon)).copy()
        if np.any(lam < 0):
            raise ConfigurationError("soft multipliers must be non-negative")
        return lam

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("host_cost", "migration_cost", "throttle_cost", "capacity",
              "max_migrations")}
        if self.soft_multipliers is not None:
            d["soft_multipliers"] = np.asarray(self.soft_multipliers).tolist()
        return d


@dataclass(frozen=True)
class VariableLayout:
    """Index maps of the four variable families, each indexed ``[i, h, t]``
    (``used`` is ``[h, t]``)."""

    n_vms: int
    horizon: int
    alloc: np.ndarray = field(init=False, repr=False)
    used: np.ndarray = field(init=False, repr=False)
    placed: np.ndarray = field(init=False, repr=False)
    migr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n, H = self.n_vms, self.horizon
        block = n * n * H

        def cube(offset):
            return (offset + np.arange(block)).reshape(H, n, n).transpose(1, 2, 0)

        object.__setattr__(self, "alloc", cube(0))
        object.__setattr__(self, "used",
                           (block + np.arange(n * H)).reshape(H, n).T)
        object.__setattr__(self, "placed", cube(block + n * H))
        object.__setattr__(self, "migr", cube(2 * block + n * H))

    @property
    def n_vars(self) -> int:
        return self.horizon * (3 * self.n_vms ** 2 + self.n_vms)

    def names(self) -> list:
        names = [""] * self.n_vars
        n, H = self.n_vms, self.horizon
        for t in range(H):
            for h in range(n):
                names[self.used[h, t]] = f"used_{h}_{t}"
                for i in range(n):
                    names[self.alloc[i, h, t]] = f"alloc_{i}_{h}_{t}"
                    names[self.placed[i, h, t]] = f"placed_{i}_{h}_{t}"
                    names[self.migr[i, h, t]] = f"migr_{i}_{h}_{t}"
        return names


class _Rows:
    """Accumulates sparse constraint rows."""

    def __init__(self, n_vars):
        self.n_vars = n_vars
        self.r, self.c, self.v = [], [], []
        self.rhs, self.names = [], []

    def add(self, cols, vals, rhs, name):
        k = len(self.rhs)
        self.r.extend([k] * len(cols))
        self.c.extend(int(c) for c in cols)
        self.v.extend(float(v) for v in vals)
        self.rhs.append(float(rhs))
        self.names.append(name)
        return k

    def matrix(self):
        return sp.csr_matrix((self.v, (self.r, self.c)),
                             shape=(len(self.rhs), self.n_vars))


@dataclass(frozen=True)
class MilpInstance:
    flavor: str
    layout: VariableLayout
    costs: CostConfig
    forecast: np.ndarray          # (N, H) real forecast used by the instance
    pred_bound: np.ndarray        # (N, H) integral demand bound in hard rows
    active: np.ndarray            # (N, H) bool
    prev_host: np.ndarray         # (N,) host at the boundary, -1 if none
    host_labels: np.ndarray       # state host -> instance host
    prev_state: PackingState
    p: np.ndarray                 # prediction-independent linear cost
    c_obj: np.ndarray             # full linear objective
    const: float                  # c(yhat)
    G: sp.csr_matrix              # fixed inequality rows, G v <= h
    h: np.ndarray
    A_pred: sp.csr_matrix         # prediction-dependent rows (hard only)
    b_pred: np.ndarray
    pred_index: np.ndarray        # (n_pred, 3): forecast i, t and placed column
    E: sp.csr_matrix              # equality rows, E v = e
    e: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integrality: np.ndarray
    multipliers: Optional[np.ndarray]
    symmetry: bool
    row_names: dict

    @property
    def n_vars(self) -> int:
        return self.layout.n_vars

    @property
    def A_ub(self) -> sp.csr_matrix:
        return sp.vstack([self.G, self.A_pred], format="csr")

    @property
    def b_ub(self) -> np.ndarray:
        return np.concatenate([self.h, self.b_pred])

    def objective(self, v: np.ndarray) -> float:
        return float(self.c_obj @ v + self.const)

    def evaluate(self, v: np.ndarray, demand: np.ndarray) -> float:
        """Objective of decision ``v`` with ``demand`` in place of the forecast.

        This is the regret of ``v``: ``p.v + c(y)``, plus ``lambda.A(y) v`` for
        the soft flavor.
        """
        demand = np.asarray(demand, float)
        L = self.layout
        val = float(self.p @ v) + self.costs.unit_throttle * float(
            np.sum(demand[self.active]))
        if self.flavor == "soft":
            alloc = v[L.alloc]
            placed = v[L.placed]
            val += float(np.sum(self.multipliers
                                * (alloc - demand[:, None, :] * placed)))
        return val

    def unpack(self, v: np.ndarray) -> dict:
        L = self.layout
        return {"alloc": v[L.alloc], "used": v[L.used],
                "placed": v[L.placed], "migr": v[L.migr]}

    def first_step(self, v: np.ndarray) -> Decision:
        """Step-0 decision expressed in the host labels of ``prev_state``."""
        parts = self.unpack(v)
        # instance host k is state host inv[k]
        inv = np.argsort(self.host_labels)
        placed = np.zeros_like(parts["placed"][:, :, 0])
        alloc = np.zeros_like(placed)
        used = np.zeros(self.layout.n_vms)
        placed[:, inv] = parts["placed"][:, :, 0]
        alloc[:, inv] = parts["alloc"][:, :, 0]
        used[inv] = parts["used"][:, 0]
        return Decision.from_matrices(placed, alloc, used)

    def step_cost(self, v: np.ndarray, demand: np.ndarray, k: int = 0) -> float:
        """Objective contribution of horizon step ``k`` at ``demand[:, k]``
        (primary terms only: hosts, migrations, throttling)."""
        parts = self.unpack(v)
        c = self.costs
        act = self.active[:, k]
        throttle = np.sum(np.asarray(demand, float)[act, k]
                          - parts["alloc"][act, :, k].sum(axis=1))
        return float(c.host_cost * parts["used"][:, k].sum()
                     + c.migration_cost / 2 * parts["migr"][:, :, k].sum()
                     + c.unit_throttle * throttle)

    def is_feasible(self, v: np.ndarray, tol: float = 1e-6) -> bool:
        if np.any(v < self.lb - tol) or np.any(v > self.ub + tol):
            return False
        if np.any(self.A_ub @ v > self.b_ub + tol):
            return False
        if np.any(np.abs(self.E @ v - self.e) > tol):
            return False
        ints = v[self.integrality]
        return bool(np.all(np.abs(ints - np.round(ints)) <= tol))


def _quantize(forecast: np.ndarray) -> np.ndarray:
    # integer alloc can cover a real demand only when the bound is rounded up
    return np.ceil(forecast - 1e-9)


def canonical_labels(host: np.ndarray) -> np.ndarray:
    """Relabel hosts in order of the lowest VM index they carry.

    Returns ``label`` with ``label[state_host] = instance_host``. Under this
    labeling VM ``i`` sits on a host ``<= i`` and occupied hosts come first,
    so a previous placement never conflicts with the symmetry rows.
    """
    n = host.shape[0]
    order = []
    for h in host:
        if h >= 0 and h not in order:
            order.append(int(h))
    order += [h for h in range(n) if h not in order]
    label = np.empty(n, int)
    label[order] = np.arange(n)
    return label


def build_instance(flavor: str, forecast, prev_state: Optional[PackingState],
                   costs: CostConfig, active=None, symmetry: bool = True,
                   quantize: bool = True) -> MilpInstance:
    """Assemble the MILP for ``forecast`` (``N x H``) starting from ``prev_state``.

    ``symmetry`` adds the host-ordering rows and fixes ``placed[i, h] = 0``
    for ``h > i`` through the variable bounds. Host labels of ``prev_state``
    are then canonicalized (see :func:`canonical_labels`);
    :meth:`MilpInstance.first_step` maps decisions back.
    """
    if flavor not in FLAVORS:
        raise ConfigurationError(f"unknown MILP flavor {flavor!r}")
    forecast = np.array(forecast, dtype=float, ndmin=2)
    if forecast.ndim != 2:
        raise ContractViolation("forecast must be an N x H matrix")
    if not np.all(np.isfinite(forecast)) or np.any(forecast < 0):
        raise ContractViolation("forecast entries must be finite and >= 0")
    n, H = forecast.shape
    if prev_state is None:
        prev_state = PackingState.empty(n)
    if prev_state.n_vms != n:
        raise ContractViolation(
            f"prev_state has {prev_state.n_vms} VMs, forecast has {n}")
    active = (np.ones((n, H), bool) if active is None
              else np.broadcast_to(np.asarray(active, bool), (n, H)).copy())
    if n > 0 and np.any((prev_state.host >= 0) & (prev_state.host >= n)):
        raise ContractViolation("prev_state places a VM on a nonexistent host")

    L = VariableLayout(n, H)
    C = costs.capacity
    nv = L.n_vars
    bound = _quantize(forecast) if quantize else forecast.copy()

    p = np.zeros(nv)
    p[L.used] = costs.host_cost
    p[L.migr] = costs.migration_cost / 2.0
    p[L.alloc] = -costs.unit_throttle
    const = costs.unit_throttle * float(np.sum(forecast[active]))
    c_obj = p.copy()
    lam = None
    if flavor == "soft":
        lam = costs.multipliers(n, H)
        c_obj[L.alloc] += lam
        c_obj[L.placed] -= lam * forecast[:, None, :]

    lb = np.zeros(nv)
    ub = np.ones(nv)
    ub[L.alloc] = C
    integrality = np.ones(nv, bool)

    labels = canonical_labels(prev_state.host) if symmetry else np.arange(n)
    prev = np.where(prev_state.host >= 0,
                    labels[np.maximum(prev_state.host, 0)], -1)
    for t in range(H):
        for i in range(n):
            if not active[i, t]:
                ub[L.alloc[i, :, t]] = 0
                ub[L.placed[i, :, t]] = 0
            if t == 0:
                linked = active[i, 0] and prev[i] >= 0
            else:
                linked = active[i, t] and active[i, t - 1]
            if not linked:
                ub[L.migr[i, :, t]] = 0
    if symmetry:
        for i in range(n):
            for h in range(i + 1, n):
                ub[L.placed[i, h, :]] = 0

    G = _Rows(nv)
    E = _Rows(nv)
    for t in range(H):
        for h in range(n):
            G.add(list(L.alloc[:, h, t]) + [L.used[h, t]],
                  [1.0] * n + [-C], 0.0, f"cap_h{h}_t{t}")
        for i in range(n):
            for h in range(n):
                G.add([L.alloc[i, h, t], L.placed[i, h, t]], [1.0, -C], 0.0,
                      f"support_i{i}_h{h}_t{t}")
        for h in range(n):
            G.add(L.migr[:, h, t], [1.0] * n, costs.max_migrations,
                  f"maxmigr_h{h}_t{t}")
        for i in range(n):
            if t == 0:
                if not (active[i, 0] and prev[i] >= 0):
                    continue
                for h in range(n):
                    before = 1.0 if prev[i] == h else 0.0
                    # before - placed <= migr ; placed - before <= migr
                    G.add([L.placed[i, h, 0], L.migr[i, h, 0]], [-1.0, -1.0],
                          -before, f"migrdn_i{i}_h{h}_t0")
                    G.add([L.placed[i, h, 0], L.migr[i, h, 0]], [1.0, -1.0],
                          before, f"migrup_i{i}_h{h}_t0")
            elif active[i, t] and active[i, t - 1]:
                for h in range(n):
                    G.add([L.placed[i, h, t - 1], L.placed[i, h, t],
                           L.migr[i, h, t]], [1.0, -1.0, -1.0], 0.0,
                          f"migrdn_i{i}_h{h}_t{t}")
                    G.add([L.placed[i, h, t - 1], L.placed[i, h, t],
                           L.migr[i, h, t]], [-1.0, 1.0, -1.0], 0.0,
                          f"migrup_i{i}_h{h}_t{t}")
        if symmetry:
            for h in range(n - 1):
                G.add([L.used[h + 1, t], L.used[h, t]], [1.0, -1.0], 0.0,
                      f"order_h{h}_t{t}")
        for i in range(n):
            if active[i, t]:
                E.add(L.placed[i, :, t], [1.0] * n, 1.0, f"single_i{i}_t{t}")

    A = _Rows(nv)
    pred_index = []
    if flavor == "hard":
        for t in range(H):
            for i in range(n):
                for h in range(n):
                    A.add([L.alloc[i, h, t], L.placed[i, h, t]],
                          [1.0, -bound[i, t]], 0.0, f"demand_i{i}_h{h}_t{t}")
                    pred_index.append((i, t, L.placed[i, h, t]))

    return MilpInstance(
        flavor=flavor, layout=L, costs=costs, forecast=forecast,
        pred_bound=bound, active=active, prev_host=prev, host_labels=labels,
        prev_state=prev_state, p=p, c_obj=c_obj, const=const,
        G=G.matrix(), h=np.array(G.rhs), A_pred=A.matrix(),
        b_pred=np.array(A.rhs), pred_index=np.array(pred_index, int).reshape(-1, 3),
        E=E.matrix(), e=np.array(E.rhs), lb=lb, ub=ub,
        integrality=integrality, multipliers=lam, symmetry=symmetry,
        row_names={"G": G.names, "A_pred": A.names, "E": E.names},
    )


def sparsify(instance: MilpInstance, prev_state: PackingState,
             movable_budget: int) -> MilpInstance:
    """Freeze the placement of VMs that neither arrive, depart, nor are among
    the ``movable_budget`` VMs chosen to stay movable.

    Frozen VMs keep ``prev_state``'s host over the whole horizon and cannot
    migrate; their allocation stays free. Movable VMs are picked by the
    largest gap between forecast and current allocation (ties to the lower
    index). Pinning placements invalidates the host-ordering rows, so a
    sparsified instance is rebuilt without them.
    """
    if movable_budget < 0:
        raise ContractViolation("movable_budget must be >= 0")
    n, H = instance.forecast.shape
    prev = prev_state.host
    act = instance.active
    arriving = act[:, 0] & (prev < 0)
    departing = (prev >= 0) & ~act.all(axis=1)
    candidates = [i for i in range(n)
                  if prev[i] >= 0 and act[i].all() and not departing[i]]
    gap = np.abs(instance.forecast[:, 0] - prev_state.alloc)
    ranked = sorted(candidates, key=lambda i: (-gap[i], i))
    frozen = sorted(ranked[movable_budget:])
    if not frozen:
        return instance
    out = build_instance(instance.flavor, instance.forecast, prev_state,
                         instance.costs, instance.active, symmetry=False)
    L = out.layout
    lb, ub = out.lb.copy(), out.ub.copy()
    for i in frozen:
        for h in range(n):
            val = 1.0 if prev[i] == h else 0.0
            lb[L.placed[i, h, :]] = val
            ub[L.placed[i, h, :]] = val
            ub[L.migr[i, h, :]] = 0.0
    return _replace(out, lb=lb, ub=ub)


def _replace(inst: MilpInstance, **changes) -> MilpInstance:
    return replace(inst, **changes)


def qp_relax(instance: MilpInstance, penalty: float):
    """Continuous relaxation with ``penalty * ||v||^2`` added to the objective.

    The prediction-dependent rows use the real-valued forecast (not the
    rounded bound) so that the relaxation is differentiable in it. The
    returned :class:`~cloudpack.solve.qp.QpInstance` carries the derivatives
    of its data with respect to the flattened forecast ``yhat[i, t] -> i*H+t``.
    """
    from .solve.qp import QpInstance

    if penalty <= 0:
        raise ContractViolation("penalty must be positive")
    n, H = instance.forecast.shape
    L = instance.layout
    nv = instance.n_vars
    n_par = n * H
    A_pred = instance.A_pred.tolil(copy=True)
    for row, (i, t, col) in enumerate(instance.pred_index):
        A_pred[row, col] = -instance.forecast[i, t]
    A_ub = sp.vstack([instance.G, A_pred.tocsr()], format="csr")

    n_g = instance.G.shape[0]
    dA = None
    if len(instance.pred_index):
        idx = instance.pred_index
        dA = (idx[:, 0] * H + idx[:, 1],            # parameter
              n_g + np.arange(len(idx)),            # row of A_ub
              idx[:, 2],                            # column
              -np.ones(len(idx)))
    dq = np.zeros((n_par, nv))
    if instance.flavor == "soft":
        for i in range(n):
            for t in range(H):
                dq[i * H + t, L.placed[i, :, t]] = -instance.multipliers[i, :, t]
    dconst = np.where(instance.active, instance.costs.unit_throttle, 0.0).ravel()
    return QpInstance(
        P=np.full(nv, 2.0 * penalty), q=instance.c_obj.copy(),
        A_ub=A_ub.toarray(), b_ub=instance.b_ub.copy(),
        A_eq=instance.E.toarray(), b_eq=instance.e.copy(),
        lb=instance.lb.copy(), ub=instance.ub.copy(), const=instance.const,
        dq=dq, dA_ub=dA, dconst=dconst,
    )


def regret_coefficients(instance: MilpInstance, demand: np.ndarray) -> np.ndarray:
    """Gradient of :meth:`MilpInstance.evaluate` with respect to ``v``."""
    g = instance.p.copy()
    if instance.flavor == "soft":
        L = instance.layout
        lam = instance.multipliers
        g[L.alloc] += lam
        g[L.placed] -= lam * np.asarray(demand, float)[:, None, :]
    return g


def forecast_sensitivity(instance: MilpInstance, v: np.ndarray) -> np.ndarray:
    """How the decision ``v`` loads on each forecast entry, as an ``N x H`` map.

    For the soft flavor this is the explicit derivative of the objective's
    prediction-dependent term, ``-sum_h lambda * placed``. For the hard
    flavor the forecast enters through ``alloc <= yhat * placed``, whose
    multiplier at a binding row is the marginal throttling value ``th/C``;
    the map is ``-(th/C) * sum_h alloc``. Primary instances do not depend on
    the forecast beyond the objective constant and map to zero.
    """
    parts = instance.unpack(v)
    if instance.flavor == "soft":
        return -np.sum(instance.multipliers * parts["placed"], axis=1)
    if instance.flavor == "hard":
        return -instance.costs.unit_throttle * parts["alloc"].sum(axis=1)
    return np.zeros_like(instance.forecast)


def n_variables(n_vms: int, horizon: int) -> int:
    return VariableLayout(n_vms, horizon).n_vars


__all__ = [
    "FLAVORS", "CostConfig", "VariableLayout", "MilpInstance", "build_instance",
    "canonical_labels",
    "sparsify", "qp_relax", "regret_coefficients", "forecast_sensitivity",
    "n_variables",
]
