"""Per-agent constrained MDP: tabular enumeration, exact evaluation, error bound.

Two tabular layouts are used.  ProductSpace enumerates the full
(aoi, battery, harvest, cost) box with factored index arithmetic and is the
fast substrate for sampling-based training.  TabularCmdp restricts to the
states reachable from the initial distribution and materializes kernel rows;
it backs the LP oracle, exact policy evaluation, and golden-file dumps.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import (
    Action,
    N_ACTIONS,
    DeviceModel,
    local_utility_xe,
    next_aoi_battery,
    penalty,
)

__all__ = [
    "ConstraintVector",
    "ProductSpace",
    "TabularCmdp",
    "build_cmdp",
    "discounted_value",
    "lemma1_bound",
    "theta_max_for",
]

KERNEL_TOL = 1e-12
DEFAULT_STATE_CAP = 100_000
DEFAULT_EXACT_CAP = 4_000


def theta_max_for(gamma: float) -> float:
    """Normalization bound: the discounted cost of always offloading."""
    return 1.0 / (1.0 - gamma)


@dataclass(frozen=True)
class ConstraintVector:
    """Per-agent offloading budgets in discounted units, each in [0, theta_max]."""

    theta: np.ndarray
    theta_max: float

    def __post_init__(self):
        arr = np.asarray(self.theta, dtype=float)
        object.__setattr__(self, "theta", arr)
        if self.theta_max <= 0:
            raise ValueError("theta_max must be positive")
        if np.any(arr < -1e-12) or np.any(arr > self.theta_max + 1e-12):
            raise ValueError("theta components must lie in [0, theta_max]")

    @property
    def n(self) -> int:
        return int(self.theta.shape[0])

    def frequencies(self) -> np.ndarray:
        """Per-step offload frequencies theta / theta_max, each in [0, 1]."""
        return self.theta / self.theta_max

    def freq_sum_excluding(self, i: int) -> float:
        f = self.frequencies()
        return float(f.sum() - f[i])

    def replace(self, i: int, value: float) -> "ConstraintVector":
        theta = self.theta.copy()
        theta[i] = value
        return ConstraintVector(theta, self.theta_max)


class ProductSpace:
    """Full-product tabular layout of one device's chain-augmented states.

    Index layout: idx = ((x-1)*nE + (e - e_floor))*nH*nC + h_idx*nC + c_idx.
    """

    _cache: dict[DeviceModel, "ProductSpace"] = {}

    def __init__(self, model: DeviceModel):
        self.model = model
        self.nX = model.aoi_cap
        self.e_floor = model.battery_floor
        self.nE = model.battery_cap - self.e_floor + 1
        self.h_values = model.harvest.values()
        self.c_values = model.cost.values()
        self.nH = len(self.h_values)
        self.nC = len(self.c_values)
        self.nXE = self.nX * self.nE
        self.n_states = self.nXE * self.nH * self.nC
        self.HP = model.harvest.transition_matrix()
        self.CP = model.cost.transition_matrix()
        self.HCUM = np.cumsum(self.HP, axis=1)
        self.CCUM = np.cumsum(self.CP, axis=1)

        nhc = self.nH * self.nC
        U = np.empty(self.n_states)
        pending = np.zeros(self.n_states, dtype=bool)
        next_xe = np.full((self.n_states, N_ACTIONS), -1, dtype=np.int64)
        for x in range(1, self.nX + 1):
            for e in range(self.e_floor, model.battery_cap + 1):
                xe = (x - 1) * self.nE + (e - self.e_floor)
                u = local_utility_xe(x, e)
                for hi, h in enumerate(self.h_values):
                    for ci, c in enumerate(self.c_values):
                        idx = xe * nhc + hi * self.nC + ci
                        U[idx] = u
                        pending[idx] = e < 0
                        for a in (Action.WAIT, Action.LOCAL, Action.OFFLOAD):
                            if e < 0 and a != Action.WAIT:
                                continue
                            x2, e2 = next_aoi_battery(x, e, int(h), int(c), a, model)
                            next_xe[idx, a] = (x2 - 1) * self.nE + (e2 - self.e_floor)
        self.U = U
        self.PENDING = pending
        self.NEXT_XE = next_xe
        self.ADM = next_xe >= 0
        self.COST = np.zeros((self.n_states, N_ACTIONS))
        self.COST[:, Action.OFFLOAD] = 1.0

    @classmethod
    def for_model(cls, model: DeviceModel) -> "ProductSpace":
        space = cls._cache.get(model)
        if space is None:
            space = cls(model)
            cls._cache[model] = space
        return space

    def index(self, x: int, e: int, h: int, c: int) -> int:
        xe = (x - 1) * self.nE + (e - self.e_floor)
        hi = h - int(self.h_values[0])
        ci = c - int(self.c_values[0])
        return (xe * self.nH + hi) * self.nC + ci

    def tuple_of(self, idx: int) -> tuple[int, int, int, int]:
        ci = idx % self.nC
        hi = (idx // self.nC) % self.nH
        xe = idx // (self.nH * self.nC)
        x = xe // self.nE + 1
        e = xe % self.nE + self.e_floor
        return x, e, int(self.h_values[hi]), int(self.c_values[ci])

    def default_start(self) -> tuple[int, int, int, int]:
        return 1, self.model.battery_cap, int(self.h_values[0]), int(self.c_values[0])

    def start_index(self, beta_state: tuple[int, int, int, int] | None = None) -> int:
        return self.index(*(beta_state or self.default_start()))

    def reward_table(self, theta_minus_freq: float) -> np.ndarray:
        """r_hat(s, a) = u(s) + 1[a = OFFLOAD] * d(1 + theta_minus_freq)."""
        r = np.repeat(self.U[:, None], N_ACTIONS, axis=1)
        r[:, Action.OFFLOAD] += penalty(1.0 + theta_minus_freq, self.model.penalty_alpha)
        return r

    def successors(self, idx: int, action: int) -> tuple[np.ndarray, np.ndarray]:
        """Successor full-product indices and probabilities for one (s, a)."""
        xe2 = self.NEXT_XE[idx, action]
        if xe2 < 0:
            raise ValueError("inadmissible action")
        ci = idx % self.nC
        hi = (idx // self.nC) % self.nH
        hp = self.HP[hi]
        cp = self.CP[ci]
        h_nz = np.nonzero(hp)[0]
        c_nz = np.nonzero(cp)[0]
        probs = np.outer(hp[h_nz], cp[c_nz]).ravel()
        base = xe2 * self.nH * self.nC
        idxs = (base + h_nz[:, None] * self.nC + c_nz[None, :]).ravel()
        return idxs, probs


class TabularCmdp:
    """Reachable-state CMDP with explicit kernel rows and reward/cost tables."""

    def __init__(
        self,
        model: DeviceModel,
        theta_i: float,
        theta_minus_freq: float,
        states: list[tuple[int, int, int, int]],
        admissible: np.ndarray,
        reward: np.ndarray,
        cost: np.ndarray,
        kernel_rows: list[list[tuple[np.ndarray, np.ndarray] | None]],
        beta: np.ndarray,
    ):
        self.model = model
        self.gamma = model.discount
        self.theta_i = theta_i
        self.theta_minus_freq = theta_minus_freq
        self.states = states
        self.index = {s: i for i, s in enumerate(states)}
        self.n_states = len(states)
        self.admissible = admissible
        self.reward = reward
        self.cost = cost
        self._kernel = kernel_rows
        self.beta = beta
        self.theta_max = theta_max_for(self.gamma)

    def kernel_row(self, s: int, a: int) -> tuple[np.ndarray, np.ndarray]:
        row = self._kernel[s][a]
        if row is None:
            raise ValueError(f"action {a} inadmissible in state {self.states[s]}")
        return row

    def action_pairs(self) -> list[tuple[int, int]]:
        return [
            (s, a)
            for s in range(self.n_states)
            for a in range(N_ACTIONS)
            if self.admissible[s, a]
        ]

    def dense_kernel(self, cap: int = DEFAULT_EXACT_CAP) -> np.ndarray:
        if self.n_states > cap:
            raise ValueError(f"{self.n_states} states exceeds dense-kernel cap {cap}")
        p = np.zeros((self.n_states, N_ACTIONS, self.n_states))
        for s in range(self.n_states):
            for a in range(N_ACTIONS):
                if self.admissible[s, a]:
                    idxs, probs = self.kernel_row(s, a)
                    p[s, a, idxs] = probs
        return p

    def to_json(self) -> dict:
        triplets = []
        for s in range(self.n_states):
            for a in range(N_ACTIONS):
                if self.admissible[s, a]:
                    idxs, probs = self.kernel_row(s, a)
                    for s2, p in zip(idxs.tolist(), probs.tolist()):
                        triplets.append([s, a, s2, p])
        return {
            "model": self.model.to_dict(),
            "theta_i": self.theta_i,
            "theta_minus_freq": self.theta_minus_freq,
            "states": [list(s) for s in self.states],
            "beta": self.beta.tolist(),
            "admissible": self.admissible.astype(int).tolist(),
            "reward": self.reward.tolist(),
            "cost": self.cost.tolist(),
            "kernel": triplets,
        }

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json(payload: dict) -> "TabularCmdp":
        model = DeviceModel.from_dict(payload["model"])
        states = [tuple(s) for s in payload["states"]]
        n = len(states)
        admissible = np.array(payload["admissible"], dtype=bool)
        rows: list[list] = [[None] * N_ACTIONS for _ in range(n)]
        buckets: dict[tuple[int, int], list[tuple[int, float]]] = {}
        for s, a, s2, p in payload["kernel"]:
            buckets.setdefault((s, a), []).append((s2, p))
        for (s, a), entries in buckets.items():
            idxs = np.array([e[0] for e in entries], dtype=np.int64)
            probs = np.array([e[1] for e in entries])
            rows[s][a] = (idxs, probs)
        cmdp = TabularCmdp(
            model=model,
            theta_i=float(payload["theta_i"]),
            theta_minus_freq=float(payload["theta_minus_freq"]),
            states=states,
            admissible=admissible,
            reward=np.array(payload["reward"]),
            cost=np.array(payload["cost"]),
            kernel_rows=rows,
            beta=np.array(payload["beta"]),
        )
        cmdp.validate()
        return cmdp

    @staticmethod
    def load(path: str | Path) -> "TabularCmdp":
        with open(path) as fh:
            return TabularCmdp.from_json(json.load(fh))

    def validate(self) -> None:
        for s in range(self.n_states):
            for a in range(N_ACTIONS):
                if self.admissible[s, a]:
                    _, probs = self.kernel_row(s, a)
                    if abs(probs.sum() - 1.0) > KERNEL_TOL:
                        raise ValueError(f"kernel row ({s},{a}) sums to {probs.sum()}")
        if abs(self.beta.sum() - 1.0) > KERNEL_TOL:
            raise ValueError("beta does not sum to 1")
        off = self.cost[:, Action.OFFLOAD]
        if not (np.all((self.cost == 0) | (self.cost == 1)) and np.all(off[self.admissible[:, Action.OFFLOAD]] == 1)):
            raise ValueError("cost table must be the offload indicator")


def build_cmdp(
    model: DeviceModel,
    theta_i: float,
    theta_minus_freq: float,
    *,
    beta_state: tuple[int, int, int, int] | None = None,
    state_cap: int = DEFAULT_STATE_CAP,
) -> TabularCmdp:
    """Enumerate the states reachable from beta and assemble the CMDP tables.

    theta_minus_freq is the sum of the other agents' per-step offload
    frequencies; it fixes the reward table.  theta_i (discounted units) is
    carried as the budget for the solvers.
    """
    if theta_minus_freq < 0:
        raise ValueError("theta_minus_freq must be nonnegative")
    if theta_i < 0:
        raise ValueError("theta_i must be nonnegative")
    space = ProductSpace.for_model(model)
    if space.n_states > state_cap:
        raise ValueError(
            f"state space has {space.n_states} states, exceeding cap {state_cap}"
        )
    start = space.start_index(beta_state)
    reachable: dict[int, int] = {start: 0}
    order = [start]
    queue = deque([start])
    while queue:
        idx = queue.popleft()
        for a in range(N_ACTIONS):
            if not space.ADM[idx, a]:
                continue
            idxs, _ = space.successors(idx, a)
            for nxt in idxs.tolist():
                if nxt not in reachable:
                    reachable[nxt] = len(order)
                    order.append(nxt)
                    queue.append(nxt)

    n = len(order)
    states = [space.tuple_of(i) for i in order]
    admissible = space.ADM[order].copy()
    r_full = space.reward_table(theta_minus_freq)
    reward = r_full[order].copy()
    reward[~admissible] = 0.0
    cost = space.COST[order].copy()
    cost[~admissible] = 0.0
    rows: list[list] = [[None] * N_ACTIONS for _ in range(n)]
    for compact, idx in enumerate(order):
        for a in range(N_ACTIONS):
            if not space.ADM[idx, a]:
                continue
            idxs, probs = space.successors(idx, a)
            rows[compact][a] = (
                np.array([reachable[j] for j in idxs.tolist()], dtype=np.int64),
                probs,
            )
    beta = np.zeros(n)
    beta[0] = 1.0
    return TabularCmdp(
        model=model,
        theta_i=theta_i,
        theta_minus_freq=theta_minus_freq,
        states=states,
        admissible=admissible,
        reward=reward,
        cost=cost,
        kernel_rows=rows,
        beta=beta,
    )


def policy_matrix(cmdp: TabularCmdp, policy: np.ndarray) -> np.ndarray:
    """Normalize a policy argument to an (n, 3) probability table."""
    policy = np.asarray(policy)
    if policy.ndim == 1:
        table = np.zeros((cmdp.n_states, N_ACTIONS))
        table[np.arange(cmdp.n_states), policy.astype(int)] = 1.0
    else:
        table = policy.astype(float)
    if table.shape != (cmdp.n_states, N_ACTIONS):
        raise ValueError("policy shape does not match the CMDP")
    if np.any(table[~cmdp.admissible] > 0):
        raise ValueError("policy assigns probability to an inadmissible action")
    rows = table.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-9):
        raise ValueError("policy rows must sum to 1")
    return table


def induced_transition(cmdp: TabularCmdp, policy: np.ndarray) -> np.ndarray:
    """Dense state-to-state transition matrix under the policy."""
    table = policy_matrix(cmdp, policy)
    p = np.zeros((cmdp.n_states, cmdp.n_states))
    for s in range(cmdp.n_states):
        for a in range(N_ACTIONS):
            w = table[s, a]
            if w > 0:
                idxs, probs = cmdp.kernel_row(s, a)
                p[s, idxs] += w * probs
    return p


def discounted_value(
    cmdp: TabularCmdp,
    policy: np.ndarray,
    *,
    exact_cap: int = DEFAULT_EXACT_CAP,
) -> tuple[float, float]:
    """Exact (J, K): discounted reward and cost of the policy from beta.

    Solves the two policy-evaluation linear systems directly.
    """
    if cmdp.n_states > exact_cap:
        raise ValueError(
            f"{cmdp.n_states} states exceeds the exact-evaluation cap {exact_cap}"
        )
    table = policy_matrix(cmdp, policy)
    p = induced_transition(cmdp, table)
    r_pi = (table * cmdp.reward).sum(axis=1)
    c_pi = (table * cmdp.cost).sum(axis=1)
    a = np.eye(cmdp.n_states) - cmdp.gamma * p
    sols = np.linalg.solve(a, np.column_stack([r_pi, c_pi]))
    j = float(cmdp.beta @ sols[:, 0])
    k = float(cmdp.beta @ sols[:, 1])
    return j, k


def lemma1_bound(theta_freqs, gamma: float, alpha: float, n_agents: int) -> float:
    """Bound on |J - J_tilde| between the true and decomposed rewards.

    theta_freqs are per-step offload frequencies (values in [0, 1]).  The
    bound is exactly 0 in the linear case; for concave penalties the chord
    expression is negative and its magnitude is the bound.
    """
    if n_agents < 2:
        raise ValueError("the bound requires at least 2 agents")
    theta = np.asarray(theta_freqs, dtype=float)
    if theta.shape != (n_agents,):
        raise ValueError("theta_freqs must have one entry per agent")
    if np.any(theta < 0) or np.any(theta > 1 + 1e-12):
        raise ValueError("frequencies must lie in [0, 1]")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if alpha == 1.0:
        return 0.0
    total = 0.0
    s = float(theta.sum())
    d_full = penalty(float(n_agents), alpha)
    for i in range(n_agents):
        t_minus = s - float(theta[i])
        chord = (t_minus / (n_agents - 1)) * d_full
        total += float(theta[i]) * (chord - penalty(1.0 + t_minus, alpha))
    return abs(total) / (1.0 - gamma)
