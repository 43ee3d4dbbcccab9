"""Dense two-phase simplex method for small standard-form LPs.

    minimise c.x  subject to  A x = b,  x >= 0

The envelope computations only ever need a handful of equality rows and a
few hundred columns, so a plain tableau is fast enough and keeps the dual
values at hand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPTIMAL, INFEASIBLE, UNBOUNDED, ITERATION_LIMIT = "optimal", "infeasible", "unbounded", "iteration_limit"


@dataclass
class LPResult:
    status: str
    x: np.ndarray | None
    fun: float
    dual: np.ndarray | None   # y with A^T y <= c at optimality
    basis: np.ndarray | None
    iterations: int

    @property
    def success(self) -> bool:
        return self.status == OPTIMAL


def _pivot(T, r, k):
    T[r] /= T[r, k]
    col = T[:, k].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])


def _run(T, basis, ncols, tol, max_iter, it0):
    """Iterate on tableau ``T`` (last row = reduced costs, last column = rhs)
    over the first ``ncols`` columns.  Dantzig pricing; Bland's rule after a
    run of degenerate steps."""
    m = T.shape[0] - 1
    it, degenerate = it0, 0
    while it < max_iter:
        red = T[-1, :ncols]
        if degenerate > 50:
            cand = np.flatnonzero(red < -tol)
            if not len(cand):
                return OPTIMAL, it
            k = int(cand[0])
        else:
            k = int(np.argmin(red))
            if red[k] >= -tol:
                return OPTIMAL, it
        colk = T[:m, k]
        pos = colk > tol
        if not pos.any():
            return UNBOUNDED, it
        ratios = np.full(m, np.inf)
        ratios[pos] = T[:m, -1][pos] / colk[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
        r = int(ties[np.argmin(basis[ties])])
        degenerate = degenerate + 1 if best <= tol else 0
        _pivot(T, r, k)
        basis[r] = k
        it += 1
    return ITERATION_LIMIT, it


def simplex(c, A, b, max_iter: int = 5000, tol: float = 1e-11) -> LPResult:
    c = np.asarray(c, float)
    A = np.atleast_2d(np.asarray(A, float)).copy()
    b = np.asarray(b, float).copy()
    m, n = A.shape
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1
    scale = max(1.0, np.abs(A).max(initial=0.0), np.abs(b).max(initial=0.0))

    # phase I: artificial basis, minimise the sum of artificials
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = np.arange(n, n + m)
    status, it = _run(T, basis, n + m, tol, max_iter, 0)
    if status == ITERATION_LIMIT:
        return LPResult(status, None, np.nan, None, None, it)
    if -T[-1, -1] > 1e-9 * scale:
        return LPResult(INFEASIBLE, None, np.nan, None, None, it)

    # drive remaining artificials out; drop redundant rows
    keep = np.ones(m, dtype=bool)
    for r in range(m):
        if basis[r] >= n:
            cand = np.flatnonzero(np.abs(T[r, :n]) > 1e-9)
            if len(cand):
                _pivot(T, r, int(cand[0]))
                basis[r] = int(cand[0])
            else:
                keep[r] = False
    rows = np.flatnonzero(keep)
    T = np.vstack([T[rows][:, list(range(n)) + [n + m]], np.zeros((1, n + 1))])
    basis = basis[rows]

    # phase II
    T[-1, :n] = c
    for r, j in enumerate(basis):
        T[-1] -= c[j] * T[r]
    status, it = _run(T, basis, n, tol * max(1.0, np.abs(c).max(initial=0.0)), max_iter, it)
    if status != OPTIMAL:
        return LPResult(status, None, np.nan, None, None, it)
    x = np.zeros(n)
    x[basis] = T[:-1, -1]
    x = np.maximum(x, 0.0)
    B = A[rows][:, basis]
    try:
        y_rows = np.linalg.solve(B.T, c[basis])
    except np.linalg.LinAlgError:
        y_rows = np.linalg.lstsq(B.T, c[basis], rcond=None)[0]
    y = np.zeros(m)
    y[rows] = y_rows
    y[neg] *= -1
    return LPResult(OPTIMAL, x, float(c @ x), y, basis, it)
