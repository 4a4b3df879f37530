"""Thin LP/SOCP modelling layer shared by the deterministic and chance-constrained dispatch.

Problems are assembled as a linear objective over box-bounded variables with
linear equality / inequality rows and second-order cone constraints of the form
``||A x + c||_2 <= x_t``.  Pure LPs go to HiGHS (through scipy), anything with a
cone goes to Clarabel.  ``FBMCSIM_SOLVER=clarabel`` forces Clarabel for both.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

SOLVER_ENV = "FBMCSIM_SOLVER"


class SolverError(RuntimeError):
    """Raised when the backend fails to return an optimal point."""


class InfeasibleError(SolverError):
    pass


class UnboundedError(SolverError):
    pass


@dataclass
class Solution:
    x: np.ndarray
    objective: float
    status: str
    backend: str

    def __getitem__(self, idx):
        return self.x[idx]


def _as_block(A, n_rows=None):
    if sp.issparse(A):
        return A.tocoo()
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return sp.coo_matrix(A)


class ConicProgram:
    """Incrementally built conic program with a linear objective.

    Terms are passed as ``[(A, cols), ...]`` where ``A`` has one column per
    entry of the integer index array ``cols`` returned by :meth:`add_variables`.
    """

    def __init__(self):
        self.n = 0
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self._names: dict[str, np.ndarray] = {}
        self._eq: list[tuple[sp.coo_matrix, np.ndarray]] = []
        self._le: list[tuple[sp.coo_matrix, np.ndarray]] = []
        self._soc: list[tuple[int, sp.coo_matrix, np.ndarray]] = []
        self._c = np.zeros(0)
        self.constant = 0.0

    def add_variables(self, name: str, size: int, lb=0.0, ub=np.inf) -> np.ndarray:
        idx = np.arange(self.n, self.n + size)
        self.n += size
        self._lb.append(np.broadcast_to(np.asarray(lb, float), (size,)).copy())
        self._ub.append(np.broadcast_to(np.asarray(ub, float), (size,)).copy())
        self._names[name] = idx
        self._c = np.concatenate([self._c, np.zeros(size)])
        return idx

    def variables(self, name: str) -> np.ndarray:
        return self._names[name]

    def _assemble(self, terms) -> sp.coo_matrix:
        rows, cols, vals = [], [], []
        m = None
        for A, idx in terms:
            block = _as_block(A)
            idx = np.asarray(idx)
            if block.shape[1] != idx.size:
                raise ValueError(f"term has {block.shape[1]} columns for {idx.size} variables")
            if m is None:
                m = block.shape[0]
            elif block.shape[0] != m:
                raise ValueError("terms disagree on the number of rows")
            rows.append(block.row)
            cols.append(idx[block.col])
            vals.append(block.data)
        return sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(m, self.n),
        )

    def add_eq(self, terms, rhs):
        A = self._assemble(terms)
        self._eq.append((A, np.broadcast_to(np.asarray(rhs, float), (A.shape[0],)).copy()))

    def add_le(self, terms, rhs):
        A = self._assemble(terms)
        self._le.append((A, np.broadcast_to(np.asarray(rhs, float), (A.shape[0],)).copy()))

    def add_soc(self, t_col: int, terms, const=None):
        """Require ``||sum(A_i x_i) + const||_2 <= x[t_col]``."""
        A = self._assemble(terms)
        c = np.zeros(A.shape[0]) if const is None else np.asarray(const, float)
        self._soc.append((int(t_col), A, c))

    def add_objective(self, coeffs, idx):
        self._c[np.asarray(idx)] += np.asarray(coeffs, float)

    @property
    def is_lp(self) -> bool:
        return not self._soc

    def _stack(self, blocks):
        if not blocks:
            return sp.csr_matrix((0, self.n)), np.zeros(0)
        mats = [sp.coo_matrix((A.data, (A.row, A.col)), shape=(A.shape[0], self.n)) for A, _ in blocks]
        return sp.vstack(mats).tocsr(), np.concatenate([b for _, b in blocks])

    def solve(self, backend: str | None = None) -> Solution:
        backend = backend or os.environ.get(SOLVER_ENV, "auto").lower()
        if backend not in ("auto", "highs", "clarabel"):
            raise ValueError(f"unknown solver backend {backend!r}")
        if backend == "highs" and not self.is_lp:
            raise ValueError("HiGHS cannot handle second-order cone constraints")
        if backend == "clarabel" or not self.is_lp:
            return self._solve_clarabel()
        return self._solve_highs()

    def _solve_highs(self) -> Solution:
        A_eq, b_eq = self._stack(self._eq)
        A_ub, b_ub = self._stack(self._le)
        lb = np.concatenate(self._lb) if self._lb else np.zeros(0)
        ub = np.concatenate(self._ub) if self._ub else np.zeros(0)
        lb = np.where(np.isneginf(lb), None, lb)
        ub = np.where(np.isposinf(ub), None, ub)
        res = linprog(
            self._c,
            A_ub=A_ub if A_ub.shape[0] else None,
            b_ub=b_ub if A_ub.shape[0] else None,
            A_eq=A_eq if A_eq.shape[0] else None,
            b_eq=b_eq if A_eq.shape[0] else None,
            bounds=list(zip(lb, ub)),
            method="highs",
        )
        if res.status == 2:
            raise InfeasibleError(res.message)
        if res.status == 3:
            raise UnboundedError(res.message)
        if res.status != 0:
            raise SolverError(res.message)
        return Solution(res.x, float(res.fun) + self.constant, "optimal", "highs")

    def _solve_clarabel(self) -> Solution:
        import clarabel

        A_eq, b_eq = self._stack(self._eq)
        A_ub, b_ub = self._stack(self._le)
        lb = np.concatenate(self._lb)
        ub = np.concatenate(self._ub)
        eye = sp.identity(self.n, format="csr")
        fin_lb = np.isfinite(lb)
        fin_ub = np.isfinite(ub)
        fixed = fin_lb & fin_ub & (lb == ub)
        # fixed variables become equalities, everything else a pair of inequalities
        blocks_A = [A_eq, eye[fixed]]
        blocks_b = [b_eq, lb[fixed]]
        cones = []
        n_zero = A_eq.shape[0] + int(fixed.sum())
        if n_zero:
            cones.append(clarabel.ZeroConeT(n_zero))
        free_lb = fin_lb & ~fixed
        free_ub = fin_ub & ~fixed
        blocks_A += [A_ub, -eye[free_lb], eye[free_ub]]
        blocks_b += [b_ub, -lb[free_lb], ub[free_ub]]
        n_nonneg = A_ub.shape[0] + int(free_lb.sum()) + int(free_ub.sum())
        if n_nonneg:
            cones.append(clarabel.NonnegativeConeT(n_nonneg))
        for t_col, A, c in self._soc:
            head = sp.csr_matrix(([-1.0], ([0], [t_col])), shape=(1, self.n))
            body = sp.coo_matrix((A.data, (A.row, A.col)), shape=(A.shape[0], self.n))
            blocks_A += [head, -body.tocsr()]
            blocks_b += [np.zeros(1), c]
            cones.append(clarabel.SecondOrderConeT(A.shape[0] + 1))
        A = sp.vstack(blocks_A).tocsc()
        b = np.concatenate(blocks_b)
        P = sp.csc_matrix((self.n, self.n))
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.tol_gap_abs = 1e-9
        settings.tol_gap_rel = 1e-9
        settings.tol_feas = 1e-9
        solver = clarabel.DefaultSolver(P, self._c, A, b, cones, settings)
        sol = solver.solve()
        status = str(sol.status)
        if "Infeasible" in status and "Dual" not in status:
            raise InfeasibleError(status)
        if "DualInfeasible" in status:
            raise UnboundedError(status)
        if status not in ("Solved", "AlmostSolved"):
            raise SolverError(status)
        x = np.asarray(sol.x)
        return Solution(x, float(self._c @ x) + self.constant, status.lower(), "clarabel")
