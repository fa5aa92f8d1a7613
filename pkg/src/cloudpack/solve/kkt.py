"""Sensitivity of a QP solution to parameters through its KKT conditions.

At an optimum ``v*`` with inequality multipliers ``lam*`` and equality
multipliers ``mu*``, differentiating stationarity, complementarity and the
equalities with respect to a parameter ``y_k`` gives::

    [ P            A'         E' ] [dv  ]   [ -dq_k - dA_k' lam*      ]
    [ diag(lam) A  diag(A v-b) 0 ] [dlam] = [ -diag(lam*) dA_k v*     ]
    [ E            0          0  ] [dmu ]   [ 0                       ]

Rows of inequalities that are slack have ``dlam = 0`` exactly and are
removed. Rows that are tight with a zero multiplier make the matrix
singular; the system then has many solutions, the minimum-norm one (the
limit of a vanishing Tikhonov ridge) is returned and the result is flagged.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .qp import QpInstance, QpSolution, _independent_rows

ACTIVE_TOL = 1e-7
LAMBDA_TOL = 1e-9
COND_LIMIT = 1e12
NO_DA = ((), (), (), ())      # constraints independent of the parameters


@dataclass
class JacobianBlock:
    dv: np.ndarray                  # (n, n_params)
    dlam: np.ndarray                # (m_ub, n_params) for A_ub rows
    regularized: bool
    n_weakly_active: int = 0


def _triplets(dA_ub):
    if dA_ub is None:
        return None
    par, row, col, val = (np.asarray(a) for a in dA_ub)
    return par.astype(int), row.astype(int), col.astype(int), val.astype(float)


def solve_kkt_system(qp_sol: QpSolution, qp: QpInstance, dA_dy=None,
                     dc_dy: Optional[np.ndarray] = None) -> JacobianBlock:
    """Jacobian ``dv*/dy`` of the QP solution.

    ``dc_dy`` is ``d(grad f)/dy`` with shape ``(n_params, n)`` and defaults to
    ``qp.dq``; ``dA_dy`` is a triplet ``(param, row, col, value)`` of
    ``A_ub`` entry derivatives and defaults to ``qp.dA_ub``.
    """
    if not qp_sol.success:
        raise ValueError("cannot differentiate a QP that was not solved")
    v = qp_sol.values
    n = qp.n
    dq = qp.dq if dc_dy is None else np.asarray(dc_dy, float)
    dA = qp.dA_ub if dA_dy is None else dA_dy
    n_par = dq.shape[0] if dq is not None else qp.n_params
    if dq is None:
        dq = np.zeros((n_par, n))
    m_ub = qp.A_ub.shape[0]
    trip = _triplets(dA)

    fixed = (np.isfinite(qp.lb) & np.isfinite(qp.ub)
             & (np.abs(qp.ub - qp.lb) <= 1e-12))
    free = np.nonzero(~fixed)[0]
    col_pos = -np.ones(n, int)
    col_pos[free] = np.arange(free.size)
    nf = free.size

    lam = qp_sol.duals
    slack = qp.b_ub - qp.A_ub @ v
    scale = 1.0 + np.abs(qp.A_ub).max(axis=1, initial=0.0) if m_ub else np.zeros(0)
    tight = slack <= ACTIVE_TOL * scale
    act = np.nonzero(tight | (lam > LAMBDA_TOL))[0]
    weak = int(np.sum(tight & (lam <= LAMBDA_TOL)))

    # bound rows of free variables
    lo_gap = v - qp.lb
    hi_gap = qp.ub - v
    lo_act = [j for j in free if np.isfinite(qp.lb[j])
              and (lo_gap[j] <= ACTIVE_TOL or qp_sol.duals_lb[j] > LAMBDA_TOL)]
    hi_act = [j for j in free if np.isfinite(qp.ub[j])
              and (hi_gap[j] <= ACTIVE_TOL or qp_sol.duals_ub[j] > LAMBDA_TOL)]
    weak += sum(qp_sol.duals_lb[j] <= LAMBDA_TOL for j in lo_act)
    weak += sum(qp_sol.duals_ub[j] <= LAMBDA_TOL for j in hi_act)

    A_act = qp.A_ub[np.ix_(act, free)]
    B_lo = -np.eye(n)[np.ix_(lo_act, free)]
    B_hi = np.eye(n)[np.ix_(hi_act, free)]
    rows = np.vstack([A_act, B_lo, B_hi])
    lam_rows = np.concatenate([lam[act], qp_sol.duals_lb[lo_act],
                               qp_sol.duals_ub[hi_act]])
    slack_rows = np.concatenate([slack[act], lo_gap[lo_act], hi_gap[hi_act]])
    eq_keep = _independent_rows(qp.A_eq[:, free], np.zeros(qp.A_eq.shape[0]))
    E = qp.A_eq[np.ix_(eq_keep or [], free)]
    na, ne = rows.shape[0], E.shape[0]

    H = qp.hessian[np.ix_(free, free)]
    dim = nf + na + ne
    K = np.zeros((dim, dim))
    K[:nf, :nf] = H
    K[:nf, nf:nf + na] = rows.T
    K[:nf, nf + na:] = E.T
    K[nf:nf + na, :nf] = lam_rows[:, None] * rows
    K[nf:nf + na, nf:nf + na] = np.diag(-slack_rows)
    K[nf + na:, :nf] = E

    R = np.zeros((dim, n_par))
    R[:nf] = -dq[:, free].T
    if trip is not None and len(trip[0]):
        par, row, col, val = trip
        act_pos = -np.ones(m_ub, int)
        act_pos[act] = np.arange(act.size)
        # -(dA_k)' lam on stationarity rows
        on_free = col_pos[col] >= 0
        np.add.at(R, (col_pos[col[on_free]], par[on_free]),
                  -val[on_free] * lam[row[on_free]])
        # -lam_j (dA_k v)_j on active rows
        is_act = act_pos[row] >= 0
        np.add.at(R, (nf + act_pos[row[is_act]], par[is_act]),
                  -lam[row[is_act]] * val[is_act] * v[col[is_act]])

    U, S, Vt = np.linalg.svd(K) if dim else (np.zeros((0, 0)),) * 3
    regularized = bool(dim and S.min() <= S.max() / COND_LIMIT)
    if dim == 0:
        X = np.zeros((0, n_par))
    else:
        # minimum-norm solution: directions with a negligible singular value
        # are dropped, the rest are solved exactly
        inv = np.where(S > S.max() / COND_LIMIT, 1.0 / np.maximum(S, 1e-300), 0.0)
        X = Vt.T @ (inv[:, None] * (U.T @ R))

    dv = np.zeros((n, n_par))
    dv[free] = X[:nf]
    dlam = np.zeros((m_ub, n_par))
    dlam[act] = X[nf:nf + act.size]
    return JacobianBlock(dv, dlam, regularized, weak)


def orig_system_jacobian(qp_sol: QpSolution, qp: QpInstance) -> np.ndarray:
    """``dv*/dq`` from the KKT system with constraints independent of the
    parameters (``dq = I``); used to cross-check :func:`solve_kkt_system`."""
    return solve_kkt_system(qp_sol, qp, dA_dy=NO_DA, dc_dy=np.eye(qp.n)).dv
