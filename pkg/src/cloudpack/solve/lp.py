"""Dense two-phase primal simplex.

Problems are given as ``min c.x  s.t.  A_ub x <= b_ub, A_eq x = b_eq,
lb <= x <= ub`` and converted to standard form internally. Dantzig pricing
is used until a run of degenerate pivots, after which Bland's rule takes
over to rule out cycling.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"


@dataclass
class LpSolution:
    status: Status
    x: Optional[np.ndarray]
    objective: float
    duals_ub: Optional[np.ndarray] = None   # lambda >= 0 for A_ub rows
    duals_eq: Optional[np.ndarray] = None   # multipliers of A_eq rows
    iterations: int = 0

    @property
    def success(self) -> bool:
        return self.status is Status.OPTIMAL


PIVOT_TOL = 1e-9
FEAS_TOL = 1e-8
DEGENERATE_SWITCH = 30


def _as2d(A, n):
    if A is None:
        return np.zeros((0, n))
    if hasattr(A, "toarray"):
        A = A.toarray()
    return np.atleast_2d(np.asarray(A, dtype=float)).reshape(-1, n)


class _Tableau:
    def __init__(self, M, rhs, basis):
        m, ncol = M.shape
        self.T = np.zeros((m + 1, ncol + 1))
        self.T[:m, :ncol] = M
        self.T[:m, -1] = rhs
        self.basis = list(basis)
        self.iterations = 0

    def set_cost(self, cost):
        m = len(self.basis)
        self.T[m, :-1] = cost
        self.T[m, -1] = 0.0
        for r, b in enumerate(self.basis):
            if self.T[m, b] != 0.0:
                self.T[m] -= self.T[m, b] * self.T[r]

    def pivot(self, r, c):
        T = self.T
        T[r] /= T[r, c]
        col = T[:, c].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        self.basis[r] = c
        self.iterations += 1

    def run(self, allowed, max_iter):
        """Minimize the cost row over columns in ``allowed``."""
        m = len(self.basis)
        T = self.T
        degenerate = 0
        while True:
            if self.iterations >= max_iter:
                return Status.ITER_LIMIT
            d = T[m, :-1]
            cand = np.nonzero(allowed & (d < -PIVOT_TOL))[0]
            if cand.size == 0:
                return Status.OPTIMAL
            bland = degenerate >= DEGENERATE_SWITCH
            c = int(cand[0]) if bland else int(cand[np.argmin(d[cand])])
            col = T[:m, c]
            pos = col > PIVOT_TOL
            if not np.any(pos):
                return Status.UNBOUNDED
            ratios = np.full(m, np.inf)
            ratios[pos] = T[:m, -1][pos] / col[pos]
            best = ratios.min()
            ties = np.nonzero(ratios <= best + 1e-12)[0]
            # Bland: leave on lowest basic index; otherwise largest pivot
            if bland:
                r = int(min(ties, key=lambda k: self.basis[k]))
            else:
                r = int(ties[np.argmax(col[ties])])
            degenerate = degenerate + 1 if best <= 1e-12 else 0
            self.pivot(r, c)


def solve_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, lb=None, ub=None,
             max_iter: int = 50_000) -> LpSolution:
    c = np.asarray(c, dtype=float).ravel()
    n = c.size
    A_ub = _as2d(A_ub, n)
    A_eq = _as2d(A_eq, n)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, float).ravel()
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, float).ravel()
    lb = np.zeros(n) if lb is None else np.asarray(lb, float).ravel().copy()
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, float).ravel().copy()
    if np.any(lb > ub + FEAS_TOL):
        return LpSolution(Status.INFEASIBLE, None, np.inf)

    # column map: x_j = shift_j + sum_k coef_k * y_k over standard columns
    cols = []  # (original j, coefficient)
    shift = np.zeros(n)
    ub_rows = []  # (standard column, width)
    for j in range(n):
        if np.isfinite(lb[j]):
            shift[j] = lb[j]
            cols.append((j, 1.0))
            if np.isfinite(ub[j]):
                ub_rows.append((len(cols) - 1, ub[j] - lb[j]))
        elif np.isfinite(ub[j]):
            shift[j] = ub[j]
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    ny = len(cols)
    S = np.zeros((n, ny))
    for k, (j, s) in enumerate(cols):
        S[j, k] = s
    cy = c @ S
    Aub_y = A_ub @ S
    bub_y = b_ub - A_ub @ shift
    Aeq_y = A_eq @ S
    beq_y = b_eq - A_eq @ shift
    m_ub, m_eq, m_bd = Aub_y.shape[0], Aeq_y.shape[0], len(ub_rows)
    if m_bd:
        Abd = np.zeros((m_bd, ny))
        for r, (k, _) in enumerate(ub_rows):
            Abd[r, k] = 1.0
        bbd = np.array([w for _, w in ub_rows])
    else:
        Abd, bbd = np.zeros((0, ny)), np.zeros(0)

    n_slack = m_ub + m_bd
    m = n_slack + m_eq
    rows = np.vstack([Aub_y, Abd, Aeq_y])
    rhs = np.concatenate([bub_y, bbd, beq_y])
    sign = np.where(rhs < 0, -1.0, 1.0)
    M = np.zeros((m, ny + n_slack + m))
    M[:, :ny] = rows
    M[np.arange(n_slack), ny + np.arange(n_slack)] = 1.0
    M *= sign[:, None]
    rhs = rhs * sign
    art0 = ny + n_slack
    basis = []
    need_art = []
    for r in range(m):
        if r < n_slack and sign[r] > 0:
            basis.append(ny + r)
        else:
            M[r, art0 + r] = 1.0
            basis.append(art0 + r)
            need_art.append(r)
    tab = _Tableau(M, rhs, basis)
    ncol = M.shape[1]
    is_art = np.zeros(ncol, bool)
    is_art[art0:] = True
    used_art = np.zeros(ncol, bool)
    used_art[art0 + np.array(need_art, int)] = True

    if need_art:
        tab.set_cost(used_art.astype(float))
        st = tab.run(~is_art | used_art, max_iter)
        if st is Status.ITER_LIMIT:
            return LpSolution(st, None, np.nan, iterations=tab.iterations)
        if -tab.T[m, -1] > FEAS_TOL * max(1.0, np.abs(rhs).max(initial=0)):
            return LpSolution(Status.INFEASIBLE, None, np.inf,
                              iterations=tab.iterations)
        # drive artificial variables out of the basis where possible
        for r in range(m):
            if is_art[tab.basis[r]]:
                row = tab.T[r, :art0]
                nz = np.nonzero(np.abs(row) > PIVOT_TOL)[0]
                if nz.size:
                    tab.pivot(r, int(nz[0]))
    full_cost = np.zeros(ncol)
    full_cost[:ny] = cy
    tab.set_cost(full_cost)
    st = tab.run(~is_art, max_iter)
    if st is not Status.OPTIMAL:
        return LpSolution(st, None, -np.inf if st is Status.UNBOUNDED else np.nan,
                          iterations=tab.iterations)
    y = np.zeros(ncol)
    for r, b in enumerate(tab.basis):
        y[b] = tab.T[r, -1]
    x = shift + S @ y[:ny]
    # duals from the reduced costs of the slack / artificial columns
    # (simplex multipliers of the unscaled rows; lambda = -u)
    d = tab.T[m, :-1]
    u = np.zeros(m)
    u[:n_slack] = -d[ny:ny + n_slack]
    u[n_slack:] = -d[art0 + n_slack:art0 + m] * sign[n_slack:]
    duals_ub = -u[:m_ub]
    duals_eq = -u[n_slack:]
    return LpSolution(Status.OPTIMAL, x, float(c @ x), duals_ub, duals_eq,
                      tab.iterations)
