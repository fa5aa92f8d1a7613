"""CPLEX-style LP text export of MILP instances, and a reader for the subset
written here, so instances can be cross-checked with external solvers."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

_TERM = re.compile(r"([+-])\s*(\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)?\s*([A-Za-z_][\w.]*)")


def _fmt(x: float) -> str:
    return repr(float(x))


def _expr(coefs, names) -> str:
    parts = []
    for j, a in coefs:
        if a == 0:
            continue
        sign = "-" if a < 0 else "+"
        parts.append(f"{sign} {_fmt(abs(a))} {names[j]}")
    return " ".join(parts) if parts else "0 " + names[0]


def write_lp(instance, path) -> Path:
    """Write ``instance`` (a :class:`~cloudpack.milp.MilpInstance`) to ``path``."""
    path = Path(path)
    names = instance.layout.names()
    lines = [f"\\ flavor: {instance.flavor}",
             f"\\ constant: {_fmt(instance.const)}",
             "Minimize",
             " obj: " + _expr(enumerate(instance.c_obj), names),
             "Subject To"]
    for label, M, rhs, sense in (("G", instance.G, instance.h, "<="),
                                 ("A_pred", instance.A_pred, instance.b_pred, "<="),
                                 ("E", instance.E, instance.e, "=")):
        M = sp.csr_matrix(M)
        row_names = instance.row_names[label]
        for r in range(M.shape[0]):
            lo, hi = M.indptr[r], M.indptr[r + 1]
            coefs = zip(M.indices[lo:hi], M.data[lo:hi])
            lines.append(f" {row_names[r]}: {_expr(coefs, names)} {sense} {_fmt(rhs[r])}")
    lines.append("Bounds")
    for j, name in enumerate(names):
        lines.append(f" {_fmt(instance.lb[j])} <= {name} <= {_fmt(instance.ub[j])}")
    lines.append("General")
    ints = [names[j] for j in np.nonzero(instance.integrality)[0]]
    for k in range(0, len(ints), 8):
        lines.append(" " + " ".join(ints[k:k + 8]))
    lines.append("End")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@dataclass
class LpModel:
    names: list
    c: np.ndarray
    const: float
    A_ub: np.ndarray
    b_ub: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integrality: np.ndarray


def _parse_terms(text, index):
    coefs = {}
    for sign, num, name in _TERM.findall(" + " + text if text.strip()[0] not in "+-"
                                         else text):
        a = float(num) if num else 1.0
        coefs[index[name]] = coefs.get(index[name], 0.0) + (-a if sign == "-" else a)
    return coefs


def read_lp(path) -> LpModel:
    """Parse a file produced by :func:`write_lp`."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    const = 0.0
    section = None
    obj_line, rows, bounds, ints = "", [], [], []
    for raw in text:
        line = raw.strip()
        if line.startswith("\\"):
            if line.startswith("\\ constant:"):
                const = float(line.split(":", 1)[1])
            continue
        key = line.lower()
        if key in ("minimize", "subject to", "bounds", "general", "end"):
            section = key
            continue
        if not line:
            continue
        if section == "minimize":
            obj_line += " " + line.split(":", 1)[1]
        elif section == "subject to":
            rows.append(line.split(":", 1)[1])
        elif section == "bounds":
            bounds.append(line)
        elif section == "general":
            ints.extend(line.split())
    names = [b.split("<=")[1].strip() for b in bounds]
    index = {name: j for j, name in enumerate(names)}
    n = len(names)
    c = np.zeros(n)
    for j, a in _parse_terms(obj_line, index).items():
        c[j] = a
    ub_rows, ub_rhs, eq_rows, eq_rhs = [], [], [], []
    for row in rows:
        if "<=" in row:
            lhs, rhs = row.split("<=")
            ub_rows.append(_parse_terms(lhs, index))
            ub_rhs.append(float(rhs))
        else:
            lhs, rhs = row.split("=")
            eq_rows.append(_parse_terms(lhs, index))
            eq_rhs.append(float(rhs))

    def dense(rs):
        M = np.zeros((len(rs), n))
        for r, coefs in enumerate(rs):
            for j, a in coefs.items():
                M[r, j] = a
        return M

    lb = np.array([float(b.split("<=")[0]) for b in bounds])
    ub = np.array([float(b.split("<=")[2]) for b in bounds])
    integrality = np.zeros(n, bool)
    integrality[[index[s] for s in ints]] = True
    return LpModel(names, c, const, dense(ub_rows), np.array(ub_rhs),
                   dense(eq_rows), np.array(eq_rhs), lb, ub, integrality)
