"""Mixed-integer solves: best-first branch and bound over the simplex kernel,
and a HiGHS backend for the instance sizes used in training."""
from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .lp import Status, solve_lp

log = logging.getLogger(__name__)

INT_TOL = 1e-6
FEAS_TOL = 1e-7
ABS_GAP = 1e-6


@dataclass
class MilpSolution:
    values: Optional[np.ndarray]
    objective: float
    status: Status
    node_count: int = 0
    incumbents: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status is Status.OPTIMAL


def _dense(A, n):
    if A is None:
        return np.zeros((0, n))
    if sp.issparse(A):
        return A.toarray()
    return np.asarray(A, float).reshape(-1, n)


def branch_and_bound(c, A_ub, b_ub, A_eq, b_eq, lb, ub, integrality,
                     const: float = 0.0, node_limit: int = 100_000,
                     lp_solver=None) -> MilpSolution:
    """Best-first branch and bound on the most fractional integer variable.

    Nodes are ordered by their parent's LP bound, then creation order, so the
    search is deterministic. ``incumbents`` records the objective of every
    improving integral solution in the order found.
    """
    c = np.asarray(c, float)
    n = c.size
    A_ub, A_eq = _dense(A_ub, n), _dense(A_eq, n)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, float)
    integrality = np.asarray(integrality, bool)
    lp = lp_solver or solve_lp

    best_x, best_obj = None, np.inf
    incumbents = []
    counter = itertools.count()
    lb0 = np.asarray(lb, float).copy()
    ub0 = np.asarray(ub, float).copy()
    lb0[integrality] = np.ceil(lb0[integrality] - INT_TOL)
    ub0[integrality] = np.floor(ub0[integrality] + INT_TOL)
    heap = [(-np.inf, next(counter), lb0, ub0)]
    nodes = 0
    unbounded = False
    while heap:
        bound, _, nlb, nub = heapq.heappop(heap)
        if bound >= best_obj - ABS_GAP:
            continue
        if nodes >= node_limit:
            status = Status.ITER_LIMIT
            return MilpSolution(best_x, best_obj + const if best_x is not None
                                else np.nan, status, nodes, incumbents)
        nodes += 1
        res = lp(c, A_ub, b_ub, A_eq, b_eq, nlb, nub)
        if res.status is Status.UNBOUNDED:
            unbounded = True
            break
        if not res.success:
            continue
        if res.objective >= best_obj - ABS_GAP:
            continue
        x = res.x
        frac = np.abs(x - np.round(x))
        frac[~integrality] = 0.0
        if frac.max(initial=0.0) <= INT_TOL:
            xr = x.copy()
            xr[integrality] = np.round(xr[integrality])
            obj = float(c @ xr)
            if obj < best_obj - ABS_GAP:
                best_x, best_obj = xr, obj
                incumbents.append(obj + const)
            continue
        # most fractional, lowest index on ties
        score = np.minimum(x - np.floor(x), np.ceil(x) - x)
        score[~integrality] = -1.0
        j = int(np.argmax(score))
        down_ub = nub.copy()
        down_ub[j] = np.floor(x[j])
        up_lb = nlb.copy()
        up_lb[j] = np.ceil(x[j])
        heapq.heappush(heap, (res.objective, next(counter), nlb, down_ub))
        heapq.heappush(heap, (res.objective, next(counter), up_lb, nub))
    if unbounded:
        return MilpSolution(None, -np.inf, Status.UNBOUNDED, nodes, incumbents)
    if best_x is None:
        return MilpSolution(None, np.inf, Status.INFEASIBLE, nodes, incumbents)
    return MilpSolution(best_x, best_obj + const, Status.OPTIMAL, nodes, incumbents)


def highs_milp(c, A_ub, b_ub, A_eq, b_eq, lb, ub, integrality,
               const: float = 0.0, node_limit: Optional[int] = None,
               time_limit: Optional[float] = None) -> MilpSolution:
    from scipy.optimize import Bounds, LinearConstraint, milp

    c = np.asarray(c, float)
    constraints = []
    if A_ub is not None and A_ub.shape[0]:
        constraints.append(LinearConstraint(A_ub, -np.inf, b_ub))
    if A_eq is not None and A_eq.shape[0]:
        constraints.append(LinearConstraint(A_eq, b_eq, b_eq))
    options = {"mip_rel_gap": 0.0, "presolve": True}
    if node_limit is not None:
        options["node_limit"] = node_limit
    if time_limit is not None:
        options["time_limit"] = time_limit
    res = milp(c, integrality=np.asarray(integrality, int),
               bounds=Bounds(lb, ub), constraints=constraints, options=options)
    if res.status == 2:
        return MilpSolution(None, np.inf, Status.INFEASIBLE)
    if res.status == 3:
        return MilpSolution(None, -np.inf, Status.UNBOUNDED)
    if res.x is None:
        return MilpSolution(None, np.nan, Status.ITER_LIMIT)
    x = res.x.copy()
    ints = np.asarray(integrality, bool)
    x[ints] = np.round(x[ints])
    status = Status.OPTIMAL if res.status == 0 else Status.ITER_LIMIT
    return MilpSolution(x, float(c @ x) + const, status,
                        int(getattr(res, "mip_node_count", 0) or 0))


BACKENDS = ("highs", "bnb")


def solve_milp(instance, backend: str = "highs", node_limit: Optional[int] = None,
               symmetric_check: bool = False) -> MilpSolution:
    """Solve a :class:`~cloudpack.milp.MilpInstance` to optimality.

    ``backend="bnb"`` runs the in-house branch and bound over the dense
    simplex; ``"highs"`` delegates to HiGHS through SciPy with a zero
    relative gap.
    """
    args = (instance.c_obj, instance.A_ub, instance.b_ub, instance.E,
            instance.e, instance.lb, instance.ub, instance.integrality)
    if backend == "bnb":
        sol = branch_and_bound(*args, const=instance.const,
                               node_limit=node_limit or 100_000)
    elif backend == "highs":
        sol = highs_milp(*args, const=instance.const, node_limit=node_limit)
    else:
        raise ValueError(f"unknown MILP backend {backend!r}")
    if sol.values is not None and not instance.is_feasible(sol.values, 1e-5):
        log.warning("MILP solution violates constraints beyond tolerance")
    return sol
