"""Occupancy-measure LP for one agent's CMDP: exact values, duals, policies.

The program over discounted occupancies rho(s, a) >= 0 is

    minimize    sum rho * r_hat
    subject to  sum_a rho(s', a) - gamma * sum_{s,a} p(s'|s,a) rho(s,a) = beta(s')
                sum rho * c + slack = theta_i,   slack >= 0

Total mass is 1/(1-gamma).  The never-offload deterministic policy provides
an explicit feasible starting basis, so phase 1 is never needed.  lambda_star
is the (nonnegative) multiplier of the budget row: dV/d(theta_i) = -lambda_star.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cmdp import TabularCmdp
from .env import Action, N_ACTIONS, penalty
from .simplex import LpError, LpResult, solve_standard_form

__all__ = [
    "OccupancyMeasure",
    "CmdpLp",
    "solve_cmdp_lp",
    "policy_from_occupancy",
    "budget_slopes",
    "congestion_slope",
    "write_lp_text",
]

DEFAULT_LP_STATE_CAP = 2000
MASS_TOL = 1e-8


@dataclass
class OccupancyMeasure:
    rho: np.ndarray
    objective: float
    lambda_star: float
    flow_duals: np.ndarray
    cost_value: float
    mass: float
    theta_i: float
    congestion_freq: float
    basis: np.ndarray


class CmdpLp:
    """Assembled LP for one CMDP, re-solvable under perturbed inputs.

    Re-solves warm-start from a previous basis: a budget change only moves
    the rhs, a congestion change only moves offload objective coefficients,
    so sensitivities stay exact within a linearity piece.
    """

    def __init__(
        self,
        cmdp: TabularCmdp,
        *,
        state_cap: int = DEFAULT_LP_STATE_CAP,
        pivoting: str = "dantzig",
    ):
        if cmdp.n_states > state_cap:
            raise ValueError(
                f"{cmdp.n_states} states exceeds the LP oracle cap {state_cap}"
            )
        self.cmdp = cmdp
        self.pivoting = pivoting
        self.pairs = cmdp.action_pairs()
        n_pairs = len(self.pairs)
        s_count = cmdp.n_states
        self.n_cols = n_pairs + 1  # trailing slack of the budget row
        a = np.zeros((s_count + 1, self.n_cols))
        c = np.zeros(self.n_cols)
        off_mask = np.zeros(self.n_cols, dtype=bool)
        wait_cols = np.full(s_count, -1, dtype=np.int64)
        for col, (s, act) in enumerate(self.pairs):
            a[s, col] += 1.0
            idxs, probs = cmdp.kernel_row(s, act)
            np.add.at(a[:, col], idxs, -cmdp.gamma * probs)
            a[s_count, col] = cmdp.cost[s, act]
            c[col] = cmdp.reward[s, act]
            if act == Action.OFFLOAD:
                off_mask[col] = True
            elif act == Action.WAIT:
                wait_cols[s] = col
        a[s_count, n_pairs] = 1.0  # slack
        self.a = a
        self.base_costs = c
        self.off_mask = off_mask
        self.beta = cmdp.beta.copy()
        # utility part of each offload column, before the congestion term
        self.off_base = c.copy()
        self.off_base[off_mask] -= penalty(
            1.0 + cmdp.theta_minus_freq, cmdp.model.penalty_alpha
        )
        self.wait_basis = np.concatenate([wait_cols, [n_pairs]])
        if np.any(wait_cols < 0):
            raise LpError("WAIT must be admissible everywhere")

    def costs_for(self, congestion_freq: float | None) -> np.ndarray:
        if congestion_freq is None:
            return self.base_costs
        c = self.off_base.copy()
        c[self.off_mask] += penalty(
            1.0 + congestion_freq, self.cmdp.model.penalty_alpha
        )
        return c

    def solve(
        self,
        theta_i: float | None = None,
        congestion_freq: float | None = None,
        initial_basis: np.ndarray | None = None,
    ) -> OccupancyMeasure:
        theta = self.cmdp.theta_i if theta_i is None else float(theta_i)
        if theta < -1e-12:
            raise ValueError("theta_i must be nonnegative")
        theta = max(theta, 0.0)
        freq = (
            self.cmdp.theta_minus_freq if congestion_freq is None else float(congestion_freq)
        )
        c = self.costs_for(freq)
        b = np.concatenate([self.beta, [theta]])
        basis = self.wait_basis if initial_basis is None else initial_basis
        try:
            res: LpResult = solve_standard_form(
                c, self.a, b, initial_basis=basis, pivoting=self.pivoting
            )
        except LpError as exc:  # pragma: no cover - impossible for valid CMDPs
            raise RuntimeError(f"CMDP occupancy LP failed unexpectedly: {exc}") from exc
        rho = np.zeros((self.cmdp.n_states, N_ACTIONS))
        for col, (s, act) in enumerate(self.pairs):
            rho[s, act] = res.x[col]
        y_cost = float(res.duals[self.cmdp.n_states])
        return OccupancyMeasure(
            rho=rho,
            objective=res.objective,
            lambda_star=max(0.0, -y_cost),
            flow_duals=res.duals[: self.cmdp.n_states].copy(),
            cost_value=float((rho * self.cmdp.cost).sum()),
            mass=float(rho.sum()),
            theta_i=theta,
            congestion_freq=freq,
            basis=res.basis,
        )


def solve_cmdp_lp(
    cmdp: TabularCmdp,
    theta_i: float | None = None,
    *,
    state_cap: int = DEFAULT_LP_STATE_CAP,
    pivoting: str = "dantzig",
) -> OccupancyMeasure:
    """Solve the occupancy LP at the given budget (defaults to cmdp.theta_i)."""
    return CmdpLp(cmdp, state_cap=state_cap, pivoting=pivoting).solve(theta_i)


def policy_from_occupancy(cmdp: TabularCmdp, occ: OccupancyMeasure) -> np.ndarray:
    """Stationary policy pi(a|s) = rho(s,a)/rho(s); uniform where rho(s) = 0."""
    policy = np.zeros((cmdp.n_states, N_ACTIONS))
    row_mass = occ.rho.sum(axis=1)
    for s in range(cmdp.n_states):
        if row_mass[s] > 1e-12:
            policy[s] = occ.rho[s] / row_mass[s]
        else:
            adm = cmdp.admissible[s]
            policy[s, adm] = 1.0 / adm.sum()
    return policy


def budget_slopes(
    lp: CmdpLp, theta_i: float, eps: float
) -> tuple[float, float, OccupancyMeasure]:
    """One-sided finite differences of the LP value in the budget.

    Returns (left, right, base solution); re-solves are warm-started from the
    base basis.  At a kink of the piecewise-linear value the two sides differ.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = lp.solve(theta_i)
    plus = lp.solve(theta_i + eps, initial_basis=base.basis)
    right = (plus.objective - base.objective) / eps
    left = right
    if theta_i - eps >= 0:
        minus = lp.solve(theta_i - eps, initial_basis=base.basis)
        left = (base.objective - minus.objective) / eps
    return left, right, base


def congestion_slope(
    lp: CmdpLp, theta_i: float, freq: float, eps: float
) -> tuple[float, OccupancyMeasure]:
    """Forward difference of the LP value in the congestion-frequency argument."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = lp.solve(theta_i, congestion_freq=freq)
    plus = lp.solve(theta_i, congestion_freq=freq + eps, initial_basis=base.basis)
    return (plus.objective - base.objective) / eps, base


def write_lp_text(cmdp: TabularCmdp, theta_i: float, path: str | Path) -> None:
    """Dump the program in CPLEX LP text format for external cross-checking."""
    lp = CmdpLp(cmdp)
    c = lp.costs_for(None)
    names = [f"rho_{s}_{Action(a).name.lower()}" for s, a in lp.pairs]
    lines = ["\\ discounted occupancy-measure program", "Minimize"]
    terms = " + ".join(f"{c[i]:.12g} {names[i]}" for i in range(len(names)))
    lines.append(f" obj: {terms}")
    lines.append("Subject To")
    n_states = cmdp.n_states
    for row in range(n_states):
        parts = []
        for col, name in enumerate(names):
            coef = lp.a[row, col]
            if abs(coef) > 1e-15:
                parts.append(f"{'+' if coef >= 0 else '-'} {abs(coef):.12g} {name}")
        expr = " ".join(parts).lstrip("+ ")
        lines.append(f" flow_{row}: {expr} = {cmdp.beta[row]:.12g}")
    budget_terms = " + ".join(
        names[col] for col in range(len(names)) if lp.off_mask[col]
    )
    if budget_terms:
        lines.append(f" budget: {budget_terms} <= {theta_i:.12g}")
    lines.append("End")
    Path(path).write_text("\n".join(lines) + "\n")
