"""Verification engines: decomposition exactness, error bound, gradient checks.

The reward-decomposition results are stated for policies whose per-step
offload frequencies are constant in time, so the checks here evaluate each
agent from the stationary distribution of its policy-induced chain and use
the realized stationary frequencies as the congestion arguments.  The
true-reward side is computed on the joint system: exactly (product-chain
linear solve with the full cross-moment congestion term) for small systems,
by Monte Carlo for larger ones.
"""

from __future__ import annotations

import math

import numpy as np

from .cmdp import (
    ConstraintVector,
    TabularCmdp,
    build_cmdp,
    induced_transition,
    lemma1_bound,
)
from .env import Action, penalty, penalty_derivative
from .lp_oracle import CmdpLp, budget_slopes, congestion_slope, policy_from_occupancy
from .rollouts import CompactSampler, horizon_for, joint_true_rollouts

__all__ = [
    "stationary_distribution",
    "realized_frequency",
    "exact_joint_value",
    "exactness_check",
    "bound_check",
    "gradient_check",
    "differentiability_check",
]


def stationary_distribution(
    p: np.ndarray,
    start: np.ndarray | None = None,
    *,
    tol: float = 1e-13,
    max_iter: int = 20_000,
) -> np.ndarray:
    """Stationary distribution of the chain reached from `start`.

    Power iteration with tail averaging, then an exact polish restricted to
    the support (solves mu(P - I) = 0 with the normalization row).
    """
    n = p.shape[0]
    mu = np.full(n, 1.0 / n) if start is None else np.asarray(start, dtype=float).copy()
    avg = np.zeros(n)
    for it in range(max_iter):
        mu = mu @ p
        if it >= max_iter // 2:
            avg += mu
        if it % 64 == 63 and np.max(np.abs(mu @ p - mu)) < 1e-10:
            break
    if np.max(np.abs(mu @ p - mu)) >= 1e-10:
        mu = avg / avg.sum()
    support = np.nonzero(mu > 1e-12)[0]
    ps = p[np.ix_(support, support)]
    k = len(support)
    a = np.vstack([ps.T - np.eye(k), np.ones((1, k))])
    b = np.zeros(k + 1)
    b[-1] = 1.0
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    sol = np.maximum(sol, 0.0)
    sol /= sol.sum()
    out = np.zeros(n)
    out[support] = sol
    residual = np.max(np.abs(out @ p - out))
    if residual > tol * 1e3 + 1e-10:
        raise RuntimeError(f"stationary distribution failed to converge: {residual}")
    return out


def realized_frequency(
    cmdp: TabularCmdp, policy: np.ndarray
) -> tuple[np.ndarray, float]:
    """Stationary distribution and the per-step offload frequency under it."""
    p = induced_transition(cmdp, policy)
    mu = stationary_distribution(p, start=cmdp.beta)
    freq = float(mu @ policy[:, Action.OFFLOAD]) if policy.ndim == 2 else float(
        mu @ (policy == Action.OFFLOAD)
    )
    return mu, freq


def _value_from(cmdp: TabularCmdp, policy: np.ndarray, reward_row: np.ndarray, mu: np.ndarray) -> float:
    p = induced_transition(cmdp, policy)
    v = np.linalg.solve(np.eye(cmdp.n_states) - cmdp.gamma * p, reward_row)
    return float(mu @ v)


def exact_joint_value(
    cmdps: list[TabularCmdp],
    policies: list[np.ndarray],
    mus: list[np.ndarray],
    alpha: float,
    *,
    joint_cap: int = 5000,
) -> float:
    """Exact discounted true-reward value of the composed policy.

    Builds the product chain over the agents' compact state spaces; the
    expected congestion penalty per joint state is E[N * d(N)] for N the
    Poisson-binomial count of simultaneous offloaders.
    """
    sizes = [c.n_states for c in cmdps]
    n_joint = int(np.prod(sizes))
    if n_joint > joint_cap:
        raise ValueError(f"joint space of {n_joint} states exceeds cap {joint_cap}")
    gamma = cmdps[0].gamma
    u_total = np.zeros(n_joint)
    q_list = []
    p_joint = np.ones((1, 1))
    mu_joint = np.ones(1)
    for cmdp, policy, mu in zip(cmdps, policies, mus):
        q_list.append(policy[:, Action.OFFLOAD])
        p_joint = np.kron(p_joint, induced_transition(cmdp, policy))
        mu_joint = np.kron(mu_joint, mu)
    # expand per-agent vectors onto the joint index (row-major composition)
    def expand(vec, agent):
        before = int(np.prod(sizes[:agent])) if agent > 0 else 1
        after = int(np.prod(sizes[agent + 1 :])) if agent + 1 < len(sizes) else 1
        return np.repeat(np.tile(vec, before), after)

    n_agents = len(cmdps)
    q_joint = np.zeros((n_agents, n_joint))
    for i, cmdp in enumerate(cmdps):
        u = np.array([float(x) if e >= 0 else float(x - e) for x, e, _, _ in cmdp.states])
        u_total += expand(u, i)
        q_joint[i] = expand(q_list[i], i)
    # Poisson-binomial pmf of the offloader count, per joint state
    pmf = np.zeros((n_agents + 1, n_joint))
    pmf[0] = 1.0
    for i in range(n_agents):
        q = q_joint[i]
        new = np.zeros_like(pmf)
        new[0] = pmf[0] * (1 - q)
        for k in range(1, n_agents + 1):
            new[k] = pmf[k] * (1 - q) + pmf[k - 1] * q
        pmf = new
    expected_penalty = np.zeros(n_joint)
    for k in range(1, n_agents + 1):
        expected_penalty += pmf[k] * k * penalty(float(k), alpha)
    r_bar = u_total + expected_penalty
    v = np.linalg.solve(np.eye(n_joint) - gamma * p_joint, r_bar)
    return float(mu_joint @ v)


def _composed_lp_policies(models, theta: ConstraintVector):
    """Solve each agent's LP at the budget vector; return cmdps and policies."""
    cmdps, policies = [], []
    for i, model in enumerate(models):
        cmdp = build_cmdp(model, float(theta.theta[i]), theta.freq_sum_excluding(i))
        occ = CmdpLp(cmdp).solve()
        cmdps.append(cmdp)
        policies.append(policy_from_occupancy(cmdp, occ))
    return cmdps, policies


def exactness_check(
    models,
    theta: ConstraintVector,
    *,
    joint_cap: int = 5000,
) -> dict:
    """Criterion-1 style check: composed true value vs sum of local values.

    LP policies are evaluated from their stationary distributions, with the
    congestion arguments set to the realized stationary frequencies; with a
    linear penalty the two sides coincide to solver precision.
    """
    alpha = models[0].penalty_alpha
    cmdps, policies = _composed_lp_policies(models, theta)
    mus, freqs = [], []
    for cmdp, policy in zip(cmdps, policies):
        mu, f = realized_frequency(cmdp, policy)
        mus.append(mu)
        freqs.append(f)
    total = sum(freqs)
    sum_local = 0.0
    for i, (cmdp, policy, mu) in enumerate(zip(cmdps, policies, mus)):
        f_minus = total - freqs[i]
        u = np.array([float(x) if e >= 0 else float(x - e) for x, e, _, _ in cmdp.states])
        pen = penalty(1.0 + f_minus, alpha)
        reward_row = (policy * (u[:, None] + pen * (np.arange(3) == Action.OFFLOAD))).sum(axis=1)
        sum_local += _value_from(cmdp, policy, reward_row, mu)
    j_true = exact_joint_value(cmdps, policies, mus, alpha, joint_cap=joint_cap)
    rel_err = abs(j_true - sum_local) / max(abs(j_true), 1e-12)
    return {
        "j_true": j_true,
        "sum_j_tilde": sum_local,
        "rel_err": rel_err,
        "frequencies": freqs,
    }


def bound_check(
    models,
    theta: ConstraintVector,
    *,
    n_rollouts: int = 256,
    seed: int = 0,
) -> dict:
    """Criterion-2 style check: |J - J_tilde| against the chord bound.

    J is Monte Carlo on the joint environment from stationary starts; J_tilde
    is exact per agent.  Returns the bound in the same stationary-frequency
    units and the Monte Carlo standard error.
    """
    alpha = models[0].penalty_alpha
    gamma = models[0].discount
    n_agents = len(models)
    cmdps, policies = _composed_lp_policies(models, theta)
    mus, freqs = [], []
    for cmdp, policy in zip(cmdps, policies):
        mu, f = realized_frequency(cmdp, policy)
        mus.append(mu)
        freqs.append(f)
    total = sum(freqs)
    sum_local = 0.0
    for i, (cmdp, policy, mu) in enumerate(zip(cmdps, policies, mus)):
        f_minus = total - freqs[i]
        u = np.array([float(x) if e >= 0 else float(x - e) for x, e, _, _ in cmdp.states])
        pen = penalty(1.0 + f_minus, alpha)
        reward_row = (policy * (u[:, None] + pen * (np.arange(3) == Action.OFFLOAD))).sum(axis=1)
        sum_local += _value_from(cmdp, policy, reward_row, mu)

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB0)))
    samplers = [CompactSampler(c) for c in cmdps]
    utilities = [
        np.array([float(x) if e >= 0 else float(x - e) for x, e, _, _ in c.states])
        for c in cmdps
    ]
    starts = [
        rng.choice(c.n_states, size=n_rollouts, p=mu) for c, mu in zip(cmdps, mus)
    ]
    out = joint_true_rollouts(
        samplers, policies, utilities, alpha, starts,
        gamma, n_rollouts, horizon_for(gamma), rng,
    )
    j_mc = float(out["returns"].mean())
    se = float(out["returns"].std(ddof=1) / math.sqrt(n_rollouts))
    bound = lemma1_bound(freqs, gamma, alpha, n_agents)
    abs_err = abs(j_mc - sum_local)
    return {
        "j_true_mc": j_mc,
        "j_true_se": se,
        "sum_j_tilde": sum_local,
        "abs_err": abs_err,
        "bound": bound,
        "within": bool(abs_err <= bound + 3.0 * se),
        "frequencies": freqs,
    }


def gradient_check(
    model,
    theta_i: float,
    freq_minus: float,
    *,
    eps: float = 1e-5,
) -> dict:
    """Criterion-3 style check: LP finite differences vs the closed forms.

    local is the budget-side forward difference (equals -lambda_star, the
    budget dual, i.e. -lambda*/theta_max in the normalized convention);
    coupling is the congestion-side forward difference (equals the binding
    budget times d'(1 + freq_minus)).
    """
    cmdp = build_cmdp(model, theta_i, freq_minus)
    lp = CmdpLp(cmdp)
    left, right, base = budget_slopes(lp, theta_i, eps)
    coupling_fd, _ = congestion_slope(lp, theta_i, freq_minus, eps)
    slack = abs(base.cost_value - theta_i)
    binding = base.lambda_star > 1e-9 and slack < 1e-7
    return {
        "theta_i": theta_i,
        "freq_minus": freq_minus,
        "local_fd": right,
        "local_fd_left": left,
        "neg_lambda_scaled": -base.lambda_star,
        "coupling_fd": coupling_fd,
        "coupling_analytic": theta_i * penalty_derivative(1.0 + freq_minus, model.penalty_alpha),
        "cost_value": base.cost_value,
        "binding": binding,
        "objective": base.objective,
    }


def differentiability_check(model, theta_i: float, freq_minus: float, *, eps: float = 1e-5) -> dict:
    """Criterion-4 style check: one-sided budget slopes at +-eps."""
    cmdp = build_cmdp(model, theta_i, freq_minus)
    lp = CmdpLp(cmdp)
    left, right, _ = budget_slopes(lp, theta_i, eps)
    denom = max(abs(left), abs(right), 1e-12)
    return {
        "theta_i": theta_i,
        "left": left,
        "right": right,
        "rel_gap": abs(left - right) / denom,
    }
