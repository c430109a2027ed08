"""Dense two-phase tableau simplex for small linear programs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LPSolution:
    x: np.ndarray | None
    value: float
    duals: np.ndarray | None = None     # one per equality row
    basis: list | None = None

    @property
    def feasible(self) -> bool:
        return self.x is not None


def simplex_max(c, A_eq, b_eq, tol: float = 1e-10, max_iter: int = 50_000) -> LPSolution:
    """Maximize ``c @ x`` s.t. ``A_eq @ x = b_eq``, ``x >= 0`` with Bland's rule.

    Returns the primal solution, its value and row duals ``y`` with
    ``A_eq.T @ y >= c`` at optimality.  Infeasible problems return
    ``x=None`` and value ``-inf``.
    """
    A0 = np.array(A_eq, dtype=float)
    b0 = np.array(b_eq, dtype=float)
    c = np.asarray(c, dtype=float)
    m, N = A0.shape
    sign = np.where(b0 < 0, -1.0, 1.0)
    A = A0 * sign[:, None]
    b = b0 * sign
    T = np.zeros((m + 1, N + m + 1))
    T[:m, :N] = A
    T[:m, N:N + m] = np.eye(m)
    T[:m, -1] = b
    basis = list(range(N, N + m))
    rows = list(range(m))           # original row of each tableau row

    def pivot(r, col):
        T[r] /= T[r, col]
        colv = T[:, col].copy()
        colv[r] = 0.0
        T[:] -= np.outer(colv, T[r])
        basis[r] = col

    def run(allowed):
        for _ in range(max_iter):
            neg = np.flatnonzero(T[-1, :allowed] < -tol)
            if neg.size == 0:
                return
            enter = int(neg[0])
            col = T[:-1, enter]
            pos = np.flatnonzero(col > tol)
            if pos.size == 0:
                raise ValueError("unbounded linear program")
            ratios = T[pos, -1] / col[pos]
            best = ratios.min()
            tied = pos[ratios <= best + tol * max(1.0, abs(best))]
            # Bland: leave the row whose basic variable has the smallest index
            r = int(tied[np.argmin([basis[i] for i in tied])])
            pivot(r, enter)
        raise RuntimeError("simplex iteration limit reached")

    # phase 1: minimize the sum of artificials
    T[-1, N:N + m] = 1.0
    T[-1] -= T[:m].sum(axis=0)
    run(N + m)
    if -T[-1, -1] > 1e-9 * max(1.0, np.abs(b).sum()):
        return LPSolution(None, -np.inf)
    # pivot zero-level artificials out where possible; drop redundant rows
    for i in range(m):
        if basis[i] >= N:
            nz = np.flatnonzero(np.abs(T[i, :N]) > tol)
            if nz.size:
                pivot(i, int(nz[0]))
    keep = [i for i in range(m) if basis[i] < N]
    T = np.vstack([T[keep], np.zeros((1, T.shape[1]))])
    T = np.hstack([T[:, :N], T[:, -1:]])
    basis = [basis[i] for i in keep]
    rows = [rows[i] for i in keep]
    # phase 2: minimize -c
    T[-1, :N] = -c
    for i, j in enumerate(basis):
        T[-1] -= T[-1, j] * T[i]
    run(N)
    x = np.zeros(N)
    for i, j in enumerate(basis):
        x[j] = T[i, -1]
    B = A[np.ix_(rows, basis)]
    y_kept = np.linalg.lstsq(B.T, c[basis], rcond=None)[0]
    y = np.zeros(m)
    y[rows] = y_kept
    return LPSolution(x, float(c @ x), y * sign, [int(j) for j in basis])


def solve_inequality_lp(c, A_ub, b_ub, A_eq=None, b_eq=None) -> LPSolution:
    """``max c @ x`` s.t. ``A_ub x <= b_ub``, ``A_eq x = b_eq``, ``x >= 0``.

    Slacks are appended internally; returned duals are ordered as the
    inequality rows followed by the equality rows (non-negative for the
    inequalities at optimality).
    """
    c = np.asarray(c, dtype=float)
    A_ub = np.atleast_2d(np.asarray(A_ub, dtype=float))
    b_ub = np.asarray(b_ub, dtype=float)
    n = c.size
    k = A_ub.shape[0]
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    A = np.block([[A_ub, np.eye(k)], [A_eq, np.zeros((A_eq.shape[0], k))]])
    b = np.concatenate([b_ub, b_eq])
    sol = simplex_max(np.concatenate([c, np.zeros(k)]), A, b)
    if sol.x is not None:
        sol.x = sol.x[:n]
    return sol
