"""Linear-program front end shared by the scheduling and rebalancing transcriptions.

A :class:`LinearProgram` is a plain standard-form container

    minimize    c^T z
    subject to  A_eq z  = b_eq
                A_in z <= b_in
                lower <= z <= upper

solved through HiGHS (scipy.optimize.linprog). Simplex and the
interior-point method with crossover both return vertex (basic)
solutions together with row and bound duals, which downstream code
reads as budget multipliers and discrete costates. Matrices may be
dense ndarrays or scipy.sparse; small transcriptions stay dense.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

__all__ = [
    "LinearProgram",
    "LpStatus",
    "LpSolution",
    "KktReport",
    "solve_lp",
    "check_kkt",
    "dump_lp",
]


def _is_sparse(a) -> bool:
    return sp.issparse(a)


def _check_block(a, name):
    if a is None:
        return None
    if _is_sparse(a):
        if not np.all(np.isfinite(a.data)):
            raise ValueError(f"{name} contains non-finite entries")
        return a.tocsr()
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass
class LinearProgram:
    """Standard-form LP data. Missing blocks are None / empty."""

    c: np.ndarray
    a_eq: Optional[object] = None
    b_eq: Optional[np.ndarray] = None
    a_in: Optional[object] = None
    b_in: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        if not np.all(np.isfinite(self.c)):
            raise ValueError("objective contains non-finite entries")
        n = self.c.size
        self.a_eq = _check_block(self.a_eq, "a_eq")
        self.a_in = _check_block(self.a_in, "a_in")
        for a, b, name in ((self.a_eq, self.b_eq, "eq"), (self.a_in, self.b_in, "in")):
            if (a is None) != (b is None):
                raise ValueError(f"{name} block needs both matrix and rhs")
            if a is not None:
                b = np.asarray(b, dtype=float).ravel()
                if a.shape != (b.size, n):
                    raise ValueError(
                        f"{name} block shape {a.shape} inconsistent with "
                        f"{b.size} rhs rows and {n} variables"
                    )
                if not np.all(np.isfinite(b)):
                    raise ValueError(f"b_{name} contains non-finite entries")
        if self.b_eq is not None:
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        if self.b_in is not None:
            self.b_in = np.asarray(self.b_in, dtype=float).ravel()
        self.lower = (
            np.full(n, -np.inf) if self.lower is None
            else np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        )
        self.upper = (
            np.full(n, np.inf) if self.upper is None
            else np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        )
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise ValueError("bounds contain NaN")

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_rows(self) -> int:
        rows = 0
        if self.b_eq is not None:
            rows += self.b_eq.size
        if self.b_in is not None:
            rows += self.b_in.size
        return rows


class LpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class LpError(RuntimeError):
    """Solver failed for a reason other than infeasible/unbounded."""


@dataclass
class LpSolution:
    status: LpStatus
    z: Optional[np.ndarray]
    objective: Optional[float]
    duals_eq: Optional[np.ndarray]
    duals_in: Optional[np.ndarray]
    duals_lower: Optional[np.ndarray]
    duals_upper: Optional[np.ndarray]
    iterations: int = 0


_STATUS_MAP = {
    0: LpStatus.OPTIMAL,
    2: LpStatus.INFEASIBLE,
    3: LpStatus.UNBOUNDED,
}


def solve_lp(lp: LinearProgram, method: str = "highs") -> LpSolution:
    """Solve ``lp``; returns duals alongside a vertex solution when optimal.

    ``method`` is forwarded to scipy ("highs", "highs-ds", "highs-ipm").
    HiGHS crossover keeps interior-point answers basic, so either path
    satisfies the vertex contract. Deterministic for fixed input.
    """
    res = linprog(
        lp.c,
        A_ub=lp.a_in,
        b_ub=lp.b_in,
        A_eq=lp.a_eq,
        b_eq=lp.b_eq,
        bounds=np.column_stack([lp.lower, lp.upper]),
        method=method,
    )
    if res.status == 1 or res.status == 4 or res.status not in _STATUS_MAP:
        raise LpError(f"LP solver failed (status {res.status}): {res.message}")
    status = _STATUS_MAP[res.status]
    if status is not LpStatus.OPTIMAL:
        return LpSolution(status, None, None, None, None, None, None)
    return LpSolution(
        status=status,
        z=np.asarray(res.x, dtype=float),
        objective=float(res.fun),
        duals_eq=None if lp.a_eq is None else np.asarray(res.eqlin.marginals, float),
        duals_in=None if lp.a_in is None else np.asarray(res.ineqlin.marginals, float),
        duals_lower=np.asarray(res.lower.marginals, dtype=float),
        duals_upper=np.asarray(res.upper.marginals, dtype=float),
        iterations=int(getattr(res, "nit", 0)),
    )


@dataclass
class KktReport:
    """Max-norm KKT residuals of a claimed-optimal solution.

    Sign conventions follow scipy's marginals: stationarity is
    c - A_eq^T y_eq - A_in^T y_in - y_lo - y_up = 0 with y_in <= 0,
    y_lo >= 0, y_up <= 0.
    """

    primal: float
    dual: float
    complementarity: float

    def within(self, primal_tol: float = 1e-8, comp_tol: float = 1e-7) -> bool:
        return (
            self.primal <= primal_tol
            and self.dual <= 1e-6
            and self.complementarity <= comp_tol
        )


def check_kkt(lp: LinearProgram, sol: LpSolution) -> KktReport:
    """Recompute primal/dual/complementarity residuals for an Optimal solution."""
    if sol.status is not LpStatus.OPTIMAL:
        raise ValueError("check_kkt needs an Optimal solution")
    z = np.asarray(sol.z, dtype=float)
    if z.shape != (lp.n_vars,):
        raise ValueError(f"solution has {z.shape}, LP has {lp.n_vars} variables")

    primal = 0.0
    if lp.a_eq is not None:
        primal = max(primal, float(np.max(np.abs(lp.a_eq @ z - lp.b_eq))))
    if lp.a_in is not None:
        primal = max(primal, float(np.max(np.maximum(lp.a_in @ z - lp.b_in, 0.0))))
    lo_ok = np.where(np.isfinite(lp.lower), lp.lower - z, -np.inf)
    up_ok = np.where(np.isfinite(lp.upper), z - lp.upper, -np.inf)
    primal = max(primal, float(np.max(np.maximum(lo_ok, 0.0), initial=0.0)))
    primal = max(primal, float(np.max(np.maximum(up_ok, 0.0), initial=0.0)))

    r = lp.c.copy()
    if sol.duals_eq is not None:
        r -= lp.a_eq.T @ sol.duals_eq
    if sol.duals_in is not None:
        r -= lp.a_in.T @ sol.duals_in
    if sol.duals_lower is not None:
        r -= sol.duals_lower
    if sol.duals_upper is not None:
        r -= sol.duals_upper
    dual = float(np.max(np.abs(r)))
    if sol.duals_in is not None and sol.duals_in.size:
        dual = max(dual, float(np.max(sol.duals_in, initial=-np.inf)))

    comp = 0.0
    if sol.duals_in is not None and lp.a_in is not None:
        slack = lp.b_in - lp.a_in @ z
        comp = max(comp, float(np.max(np.abs(sol.duals_in * slack), initial=0.0)))
    if sol.duals_lower is not None:
        gap = np.where(np.isfinite(lp.lower), z - lp.lower, 0.0)
        comp = max(comp, float(np.max(np.abs(sol.duals_lower * gap), initial=0.0)))
    if sol.duals_upper is not None:
        gap = np.where(np.isfinite(lp.upper), lp.upper - z, 0.0)
        comp = max(comp, float(np.max(np.abs(sol.duals_upper * gap), initial=0.0)))
    return KktReport(primal=primal, dual=dual, complementarity=comp)


def dump_lp(lp: LinearProgram, path) -> None:
    """Write the LP in a fixed-column plain-text layout for external cross-checks."""
    def rows(a):
        return a.toarray() if _is_sparse(a) else a

    with open(path, "w") as fh:
        fh.write(f"VARS {lp.n_vars}\n")
        fh.write("OBJ  " + " ".join(f"{v:+.17e}" for v in lp.c) + "\n")
        for tag, a, b in (("EQ", lp.a_eq, lp.b_eq), ("LE", lp.a_in, lp.b_in)):
            if a is None:
                continue
            dense = rows(a)
            for row, rhs in zip(dense, b):
                fh.write(
                    f"{tag:<4}"
                    + " ".join(f"{v:+.17e}" for v in row)
                    + f" | {rhs:+.17e}\n"
                )
        fh.write("LOW  " + " ".join(f"{v:+.17e}" for v in lp.lower) + "\n")
        fh.write("UPP  " + " ".join(f"{v:+.17e}" for v in lp.upper) + "\n")
