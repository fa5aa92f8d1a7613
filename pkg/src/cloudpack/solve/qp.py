"""Strictly convex quadratic programs.

``min 0.5 v'Pv + q'v + const  s.t.  A_ub v <= b_ub, A_eq v = b_eq, lb <= v <= ub``

Solved with the Goldfarb-Idnani dual active-set method: start from the
equality-constrained minimizer and repeatedly add the most violated
inequality, dropping constraints whose multiplier would turn negative.
Each iteration re-solves the equality-constrained KKT system of the
current working set, which is cheap at the sizes used here (a few hundred
variables). Variables with ``lb == ub`` are eliminated up front.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .lp import Status

KKT_TOL = 1e-6
VIOL_TOL = 1e-9


@dataclass
class QpInstance:
    """QP data plus optional derivatives with respect to a parameter vector.

    ``P`` is either a full matrix or the diagonal as a vector. ``dq`` has
    shape ``(n_params, n)``; ``dA_ub`` is a sparse triplet
    ``(param, row, col, value)`` of ``d A_ub[row, col] / d param``;
    ``dconst`` is ``d const / d param``.
    """

    P: np.ndarray
    q: np.ndarray
    A_ub: Optional[np.ndarray] = None
    b_ub: Optional[np.ndarray] = None
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    const: float = 0.0
    dq: Optional[np.ndarray] = None
    dA_ub: Optional[tuple] = None
    dconst: Optional[np.ndarray] = None

    def __post_init__(self):
        self.q = np.asarray(self.q, float).ravel()
        n = self.q.size
        self.P = np.asarray(self.P, float)
        if self.P.ndim == 0:
            self.P = np.full(n, float(self.P))
        self.A_ub = np.zeros((0, n)) if self.A_ub is None else np.asarray(
            self.A_ub, float).reshape(-1, n)
        self.b_ub = np.zeros(0) if self.b_ub is None else np.asarray(self.b_ub, float)
        self.A_eq = np.zeros((0, n)) if self.A_eq is None else np.asarray(
            self.A_eq, float).reshape(-1, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, float)
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def n_params(self) -> int:
        if self.dq is not None:
            return self.dq.shape[0]
        if self.dconst is not None:
            return len(self.dconst)
        return 0

    @property
    def hessian(self) -> np.ndarray:
        return np.diag(self.P) if self.P.ndim == 1 else self.P

    def objective(self, v) -> float:
        v = np.asarray(v, float)
        Pv = self.P * v if self.P.ndim == 1 else self.P @ v
        return float(0.5 * v @ Pv + self.q @ v + self.const)


@dataclass
class QpSolution:
    values: Optional[np.ndarray]
    objective: float
    status: Status
    duals: Optional[np.ndarray] = None       # A_ub rows, >= 0
    duals_eq: Optional[np.ndarray] = None
    duals_lb: Optional[np.ndarray] = None    # lower bounds, >= 0
    duals_ub: Optional[np.ndarray] = None    # upper bounds, >= 0
    iterations: int = 0

    @property
    def success(self) -> bool:
        return self.status is Status.OPTIMAL


def _kkt_solve(H, N, rhs_x, rhs_c):
    """Solve ``[H N'; N 0] [x; y] = [rhs_x; rhs_c]``."""
    n, m = H.shape[0], N.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = N.T
    K[n:, :n] = N
    sol = np.linalg.solve(K, np.concatenate([rhs_x, rhs_c]))
    return sol[:n], sol[n:]


def _independent_rows(E, e, tol=1e-10):
    """Drop empty and linearly dependent equality rows; None if inconsistent."""
    keep = []
    for r in range(E.shape[0]):
        if np.abs(E[r]).max(initial=0.0) <= tol:
            if abs(e[r]) > 1e-7:
                return None
            continue
        trial = keep + [r]
        if np.linalg.matrix_rank(E[trial], tol=1e-9) == len(trial):
            keep.append(r)
        else:
            # dependent: must agree with the kept rows
            coef, *_ = np.linalg.lstsq(E[keep].T, E[r], rcond=None)
            if abs(coef @ e[keep] - e[r]) > 1e-7:
                return None
    return keep


def solve_qp(qp: QpInstance, max_iter: int = 10_000) -> QpSolution:
    n = qp.n
    H_full = qp.hessian
    fixed = np.isfinite(qp.lb) & np.isfinite(qp.ub) & (np.abs(qp.ub - qp.lb) <= 1e-12)
    if np.any(qp.lb > qp.ub + 1e-12):
        return QpSolution(None, np.inf, Status.INFEASIBLE)
    free = np.nonzero(~fixed)[0]
    x_fix = np.where(fixed, qp.lb, 0.0)

    H = H_full[np.ix_(free, free)]
    q = qp.q[free] + H_full[free] @ x_fix
    A_in = qp.A_ub[:, free]
    b_in = qp.b_ub - qp.A_ub @ x_fix
    E = qp.A_eq[:, free]
    e = qp.b_eq - qp.A_eq @ x_fix

    # bounds of free variables as extra inequality rows
    lo = [j for j, k in enumerate(free) if np.isfinite(qp.lb[k])]
    hi = [j for j, k in enumerate(free) if np.isfinite(qp.ub[k])]
    nf = free.size
    C = np.vstack([A_in, -np.eye(nf)[lo], np.eye(nf)[hi]])
    d = np.concatenate([b_in, -qp.lb[free][lo], qp.ub[free][hi]])
    m_in = C.shape[0]

    eq_rows = _independent_rows(E, e)
    if eq_rows is None:
        return QpSolution(None, np.inf, Status.INFEASIBLE)
    Eq, eq_rhs = E[eq_rows], e[eq_rows]
    n_eq = len(eq_rows)

    active: list = []           # indices into C
    u = np.zeros(m_in)

    def working_set():
        return np.vstack([Eq, C[active]]) if active else Eq

    try:
        x, y = _kkt_solve(H, Eq, -q, eq_rhs)
    except np.linalg.LinAlgError:
        return QpSolution(None, np.nan, Status.INFEASIBLE)
    mu = y[:n_eq]
    it = 0
    scale = 1.0 + np.abs(C).max(axis=1, initial=0.0) if m_in else np.zeros(0)
    while True:
        it += 1
        if it > max_iter:
            return QpSolution(None, np.nan, Status.ITER_LIMIT, iterations=it)
        viol = C @ x - d if m_in else np.zeros(0)
        viol_scaled = viol / scale
        viol_scaled[active] = -np.inf
        if m_in == 0 or viol_scaled.max() <= VIOL_TOL:
            break
        p = int(np.argmax(viol_scaled))
        u_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                return QpSolution(None, np.nan, Status.ITER_LIMIT, iterations=it)
            N = working_set()
            z, r = _kkt_solve(H, N, -C[p], np.zeros(N.shape[0]))
            r_in = r[n_eq:]
            # partial step: largest move keeping active multipliers >= 0
            t2, drop = np.inf, -1
            for k, j in enumerate(active):
                if r_in[k] < -1e-14:
                    ratio = u[j] / -r_in[k]
                    if ratio < t2:
                        t2, drop = ratio, k
            az = C[p] @ z
            if np.abs(z).max(initial=0.0) > 1e-12 and az < -1e-14:
                t1 = (C[p] @ x - d[p]) / -az
            else:
                t1 = np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                return QpSolution(None, np.inf, Status.INFEASIBLE, iterations=it)
            t = min(t1, t2)
            if np.isfinite(t1):
                x = x + t * z
            for k, j in enumerate(active):
                u[j] += t * r_in[k]
            mu = mu + t * r[:n_eq]
            u_p += t
            if t1 <= t2:
                u[p] = u_p
                active.append(p)
                break
            j = active.pop(drop)
            u[j] = 0.0
    # polish on the final working set
    N = working_set()
    x, y = _kkt_solve(H, N, -q, np.concatenate([eq_rhs, d[active]]))
    mu = y[:n_eq]
    u = np.zeros(m_in)
    u[active] = np.maximum(y[n_eq:], 0.0)

    v = x_fix.copy()
    v[free] = x
    m_ub = qp.A_ub.shape[0]
    duals = u[:m_ub]
    lam_lo = np.zeros(n)
    lam_hi = np.zeros(n)
    lam_lo[free[lo]] = u[m_ub:m_ub + len(lo)]
    lam_hi[free[hi]] = u[m_ub + len(lo):]
    duals_eq = np.zeros(qp.A_eq.shape[0])
    duals_eq[eq_rows] = mu
    # multipliers of fixed variables absorb the stationarity residual
    g = H_full @ v + qp.q + qp.A_ub.T @ duals + qp.A_eq.T @ duals_eq
    lam_lo[fixed] = np.maximum(g[fixed], 0.0)
    lam_hi[fixed] = np.maximum(-g[fixed], 0.0)
    return QpSolution(v, qp.objective(v), Status.OPTIMAL, duals, duals_eq,
                      lam_lo, lam_hi, it)


def kkt_residuals(qp: QpInstance, sol: QpSolution) -> dict:
    """Stationarity, primal feasibility and complementarity residuals."""
    v = sol.values
    grad = (qp.hessian @ v + qp.q + qp.A_ub.T @ sol.duals
            + qp.A_eq.T @ sol.duals_eq - sol.duals_lb + sol.duals_ub)
    slack = qp.A_ub @ v - qp.b_ub
    with np.errstate(invalid="ignore"):
        lo_gap = np.where(np.isfinite(qp.lb), v - qp.lb, 0.0)
        hi_gap = np.where(np.isfinite(qp.ub), qp.ub - v, 0.0)
    return {
        "stationarity": float(np.abs(grad).max(initial=0.0)),
        "primal": float(max(slack.max(initial=0.0),
                            np.abs(qp.A_eq @ v - qp.b_eq).max(initial=0.0),
                            (-lo_gap).max(initial=0.0), (-hi_gap).max(initial=0.0))),
        "complementarity": float(max(
            np.abs(sol.duals * slack).max(initial=0.0),
            np.abs(sol.duals_lb * lo_gap).max(initial=0.0),
            np.abs(sol.duals_ub * hi_gap).max(initial=0.0))),
        "dual": float(-min(sol.duals.min(initial=0.0), sol.duals_lb.min(initial=0.0),
                           sol.duals_ub.min(initial=0.0))),
    }
