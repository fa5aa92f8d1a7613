"""Optimization kernels: simplex LP, branch-and-bound MILP, active-set QP
and KKT sensitivities."""
from .bnb import MilpSolution, branch_and_bound, solve_milp
from .kkt import JacobianBlock, solve_kkt_system
from .lp import LpSolution, Status, solve_lp
from .qp import QpInstance, QpSolution, kkt_residuals, solve_qp

__all__ = [
    "LpSolution", "MilpSolution", "QpInstance", "QpSolution", "JacobianBlock",
    "Status", "solve_lp", "solve_milp", "branch_and_bound", "solve_qp",
    "solve_kkt_system", "kkt_residuals",
]
