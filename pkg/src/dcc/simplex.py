"""Dense revised simplex for small standard-form LPs, with dual extraction.

Solves min c'x subject to Ax = b, x >= 0.  Designed for the desk-scale
occupancy-measure programs in this package: a few thousand variables at most,
dense basis inverse maintained by product-form updates with periodic
refactorization.  Dantzig pricing by default, switching to Bland's rule after
a degenerate streak so cycling is impossible; pure Bland is available.

Warm restarts: pass `initial_basis` from a previous solution.  An rhs change
leaves reduced costs untouched, a cost change leaves feasibility untouched,
so re-solves after small perturbations typically verify the old basis and
return immediately, which keeps finite-difference sensitivities exact within
a linearity piece.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["LpError", "LpInfeasible", "LpUnbounded", "LpResult", "solve_standard_form"]

PIVOT_TOL = 1e-9
DEGENERATE_STREAK = 40
REFACTOR_EVERY = 200


class LpError(Exception):
    pass


class LpInfeasible(LpError):
    pass


class LpUnbounded(LpError):
    pass


@dataclass
class LpResult:
    x: np.ndarray
    objective: float
    duals: np.ndarray
    basis: np.ndarray
    n_pivots: int


def _refactor(a: np.ndarray, basis: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.inv(a[:, basis])
    except np.linalg.LinAlgError as exc:
        raise LpError("singular basis") from exc


def _pivot(b_inv: np.ndarray, basis: np.ndarray, u: np.ndarray, enter: int, leave: int):
    basis[leave] = enter
    row = b_inv[leave] / u[leave]
    corr = np.outer(u, row)
    corr[leave] = 0.0
    b_inv -= corr
    b_inv[leave] = row


def _primal_loop(c, a, b, basis, b_inv, x_b, allowed, n_real, pivoting, max_pivots):
    """Run primal pivots to optimality over the `allowed` entering columns.

    Columns >= n_real are artificials: they never enter, and whenever one is
    basic at zero level it is pivoted out at a zero-length step so it cannot
    turn positive again.
    """
    m = a.shape[0]
    n_pivots = 0
    degenerate = 0
    use_bland = pivoting == "bland"
    while True:
        if n_pivots > max_pivots:
            raise LpError(f"pivot limit {max_pivots} exceeded")
        y = c[basis] @ b_inv
        reduced = c - y @ a
        reduced[basis] = 0.0
        candidates = np.nonzero(allowed & (reduced < -PIVOT_TOL))[0]
        if candidates.size == 0:
            return basis, b_inv, x_b, n_pivots
        if use_bland or degenerate >= DEGENERATE_STREAK:
            enter = int(candidates[0])
        else:
            enter = int(candidates[np.argmin(reduced[candidates])])
        u = b_inv @ a[:, enter]

        # a zero-level basic artificial leaves first, at zero step length
        art_rows = np.nonzero(
            (basis >= n_real) & (np.abs(u) > PIVOT_TOL) & (x_b <= PIVOT_TOL)
        )[0]
        if art_rows.size:
            leave = int(art_rows[0])
            t = 0.0
        else:
            pos = u > PIVOT_TOL
            if not np.any(pos):
                raise LpUnbounded("objective unbounded below")
            ratios = np.full(m, np.inf)
            ratios[pos] = x_b[pos] / u[pos]
            t = float(ratios.min())
            ties = np.nonzero(ratios <= t + PIVOT_TOL * (1.0 + abs(t)))[0]
            # smallest basis column index among ties (Bland-style anti-cycling)
            leave = int(ties[np.argmin(basis[ties])])
        degenerate = degenerate + 1 if t <= PIVOT_TOL else 0

        _pivot(b_inv, basis, u, enter, leave)
        n_pivots += 1
        if n_pivots % REFACTOR_EVERY == 0:
            b_inv = _refactor(a, basis)
        x_b = b_inv @ b
        np.maximum(x_b, 0.0, out=x_b)


def solve_standard_form(
    c,
    a,
    b,
    *,
    initial_basis=None,
    pivoting: str = "dantzig",
    max_pivots: int | None = None,
) -> LpResult:
    """Solve min c'x s.t. Ax = b, x >= 0 and return primal, duals, and basis.

    Redundant equality rows are tolerated (their artificial stays basic at
    level zero and the corresponding dual is 0).
    """
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = a.shape
    if c.shape != (n,) or b.shape != (m,):
        raise ValueError("inconsistent LP dimensions")
    if pivoting not in ("dantzig", "bland"):
        raise ValueError(f"unknown pivoting rule {pivoting!r}")
    if max_pivots is None:
        max_pivots = 50 * (m + n) + 1000

    sign = np.where(b < 0, -1.0, 1.0)
    a = a * sign[:, None]
    b = b * sign
    a_ext = np.hstack([a, np.eye(m)])
    c_ext = np.concatenate([c, np.zeros(m)])

    basis = None
    pivots_used = 0
    if initial_basis is not None:
        cand = np.asarray(initial_basis, dtype=np.int64).copy()
        if cand.shape == (m,) and np.all(cand >= 0) and np.all(cand < n + m):
            try:
                inv = _refactor(a_ext, cand)
            except LpError:
                inv = None
            if inv is not None:
                xb = inv @ b
                art = cand >= n
                feasible = xb.min() >= -PIVOT_TOL
                # a warm basis may not keep artificial levels at zero
                if feasible and np.any(art) and np.any(np.abs(xb[art]) > PIVOT_TOL):
                    feasible = False
                if feasible:
                    basis, b_inv = cand, inv
                    x_b = np.maximum(xb, 0.0)

    if basis is None:
        c1 = np.concatenate([np.zeros(n), np.ones(m)])
        basis = np.arange(n, n + m, dtype=np.int64)
        b_inv = np.eye(m)
        x_b = b.copy()
        allowed = np.concatenate([np.ones(n, dtype=bool), np.zeros(m, dtype=bool)])
        basis, b_inv, x_b, piv1 = _primal_loop(
            c1, a_ext, b, basis, b_inv, x_b, allowed, n, pivoting, max_pivots
        )
        pivots_used += piv1
        if float(c1[basis] @ x_b) > 1e-7:
            raise LpInfeasible("phase 1 ended with positive infeasibility")

    allowed = np.concatenate([np.ones(n, dtype=bool), np.zeros(m, dtype=bool)])
    basis, b_inv, x_b, piv2 = _primal_loop(
        c_ext, a_ext, b, basis, b_inv, x_b, allowed, n, pivoting, max_pivots
    )
    pivots_used += piv2

    # refactor once more so the reported solution and duals are crisp
    b_inv = _refactor(a_ext, basis)
    x_b = b_inv @ b
    np.maximum(x_b, 0.0, out=x_b)
    x = np.zeros(n)
    real = basis < n
    x[basis[real]] = x_b[real]
    y = c_ext[basis] @ b_inv
    return LpResult(
        x=x,
        objective=float(c_ext[basis] @ x_b),
        duals=y * sign,
        basis=basis.copy(),
        n_pivots=pivots_used,
    )
