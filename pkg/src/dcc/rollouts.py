"""Vectorized Monte Carlo rollout machinery for tabular device models."""

from __future__ import annotations

import math

import numpy as np

from .cmdp import ProductSpace, TabularCmdp
from .env import Action, N_ACTIONS

__all__ = [
    "horizon_for",
    "ProductSampler",
    "CompactSampler",
    "sample_policy_actions",
    "discounted_rollouts",
    "joint_true_rollouts",
]


def horizon_for(gamma: float, tail: float = 1e-3) -> int:
    """Rollout length with discounted truncation error below tail/(1-gamma)."""
    return int(math.ceil(math.log(tail) / math.log(gamma)))


def factored_policy_value(
    space: ProductSpace,
    greedy: np.ndarray,
    reward: np.ndarray,
    start: int,
    *,
    tol: float = 1e-7,
    max_sweeps: int = 100_000,
) -> tuple[float, float]:
    """Exact (J, K) of a deterministic policy on the full product space.

    Policy evaluation by value sweeps; the expectation over the next chain
    values contracts through the factored kernel, so each sweep costs
    O(n_states * (nH + nC)) instead of touching a dense transition matrix.
    """
    gamma = space.model.discount
    n = space.n_states
    ar = np.arange(n)
    xe2 = space.NEXT_XE[ar, greedy]
    hi = (ar // space.nC) % space.nH
    ci = ar % space.nC
    r = np.stack(
        [reward[ar, greedy], (greedy == Action.OFFLOAD).astype(float)], axis=1
    )
    v = np.zeros((space.nXE, space.nH, space.nC, 2))
    hp, cp = space.HP, space.CP
    stop = tol * (1.0 - gamma)
    for _ in range(max_sweeps):
        w = np.einsum("hH,cC,xHCk->xhck", hp, cp, v, optimize=True)
        v_new = r + gamma * w[xe2, hi, ci]
        delta = np.max(np.abs(v_new - v.reshape(n, 2)))
        v = v_new.reshape(space.nXE, space.nH, space.nC, 2)
        if delta < stop:
            break
    flat = v.reshape(n, 2)
    return float(flat[start, 0]), float(flat[start, 1])


class ProductSampler:
    """Batch next-state sampling over a full product space (two uniforms/step)."""

    def __init__(self, space: ProductSpace):
        self.space = space
        self.nH = space.nH
        self.nC = space.nC
        self.nHC = space.nH * space.nC
        self.next_xe = space.NEXT_XE
        self.hcum = space.HCUM
        self.ccum = space.CCUM

    def step(
        self, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        ci = states % self.nC
        hi = (states // self.nC) % self.nH
        u1 = rng.random(states.shape[0])
        u2 = rng.random(states.shape[0])
        h2 = (self.hcum[hi] < u1[:, None]).sum(axis=1)
        c2 = (self.ccum[ci] < u2[:, None]).sum(axis=1)
        xe2 = self.next_xe[states, actions]
        return xe2 * self.nHC + h2 * self.nC + c2


class CompactSampler:
    """Batch next-state sampling over a reachable-state CMDP (padded rows)."""

    def __init__(self, cmdp: TabularCmdp):
        self.cmdp = cmdp
        n = cmdp.n_states
        width = 1
        rows = {}
        for s in range(n):
            for a in range(N_ACTIONS):
                if cmdp.admissible[s, a]:
                    idxs, probs = cmdp.kernel_row(s, a)
                    rows[(s, a)] = (idxs, probs)
                    width = max(width, len(idxs))
        self.succ = np.zeros((n, N_ACTIONS, width), dtype=np.int64)
        self.cum = np.full((n, N_ACTIONS, width), 2.0)
        for (s, a), (idxs, probs) in rows.items():
            self.succ[s, a, : len(idxs)] = idxs
            self.cum[s, a, : len(idxs)] = np.cumsum(probs)
            self.cum[s, a, len(idxs) - 1] = 1.0 + 1e-12

    def step(
        self, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        u = rng.random(states.shape[0])
        pick = (self.cum[states, actions] < u[:, None]).sum(axis=1)
        return self.succ[states, actions, pick]


def sample_policy_actions(
    policy_cum: np.ndarray, states: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw actions from a cumulative policy table (n_states, n_actions)."""
    u = rng.random(states.shape[0])
    return (policy_cum[states] < u[:, None]).sum(axis=1)


def _as_action_lookup(policy) -> tuple[np.ndarray, bool]:
    policy = np.asarray(policy)
    if policy.ndim == 1:
        return policy.astype(np.int64), False
    cum = np.cumsum(policy, axis=1)
    cum[:, -1] = 1.0 + 1e-12
    return cum, True


def discounted_rollouts(
    sampler,
    policy,
    reward_table: np.ndarray,
    cost_table: np.ndarray,
    start: int | np.ndarray,
    gamma: float,
    n_rollouts: int,
    horizon: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-rollout discounted (reward, cost) sums for one agent.

    `policy` is either a greedy action vector or a probability table;
    `start` is a state index or an array of per-rollout start indices.
    """
    lookup, stochastic = _as_action_lookup(policy)
    if np.isscalar(start):
        states = np.full(n_rollouts, int(start), dtype=np.int64)
    else:
        states = np.asarray(start, dtype=np.int64).copy()
    j = np.zeros(n_rollouts)
    k = np.zeros(n_rollouts)
    g = 1.0
    for _ in range(horizon):
        if stochastic:
            actions = sample_policy_actions(lookup, states, rng)
        else:
            actions = lookup[states]
        j += g * reward_table[states, actions]
        k += g * cost_table[states, actions]
        states = sampler.step(states, actions, rng)
        g *= gamma
    return j, k


def joint_true_rollouts(
    samplers: list,
    policies: list,
    utilities: list[np.ndarray],
    alpha: float,
    starts: list,
    gamma: float,
    n_rollouts: int,
    horizon: int,
    rng: np.random.Generator,
) -> dict:
    """Joint-environment rollouts under the true congestion reward.

    Returns per-rollout discounted joint costs, per-agent discounted offload
    costs, and the average per-step offload frequency.
    """
    n_agents = len(samplers)
    lookups = [_as_action_lookup(p) for p in policies]
    states = []
    for start in starts:
        if np.isscalar(start):
            states.append(np.full(n_rollouts, int(start), dtype=np.int64))
        else:
            states.append(np.asarray(start, dtype=np.int64).copy())
    returns = np.zeros(n_rollouts)
    agent_costs = np.zeros((n_agents, n_rollouts))
    offload_fraction = 0.0
    g = 1.0
    actions = [None] * n_agents
    for _ in range(horizon):
        n_off = np.zeros(n_rollouts)
        for i in range(n_agents):
            lookup, stochastic = lookups[i]
            if stochastic:
                a = sample_policy_actions(lookup, states[i], rng)
            else:
                a = lookup[states[i]]
            actions[i] = a
            off = a == Action.OFFLOAD
            n_off += off
            returns += g * utilities[i][states[i]]
            agent_costs[i] += g * off
        pen = np.where(n_off > 0, np.maximum(n_off - 1.0, 0.0) ** alpha, 0.0)
        returns += g * n_off * pen
        offload_fraction += float(n_off.mean()) / n_agents
        for i in range(n_agents):
            states[i] = samplers[i].step(states[i], actions[i], rng)
        g *= gamma
    return {
        "returns": returns,
        "agent_costs": agent_costs,
        "offload_frequency": offload_fraction / horizon,
    }
