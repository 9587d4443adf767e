"""Toy edge-offloading environment: per-device dynamics and congestion rewards.

Each device tracks the age of information (AoI) of its last processed data
batch and its battery level, harvests energy and pays a processing cost that
both evolve as small Markov chains, and chooses at every step between waiting,
processing locally, or offloading to a shared edge server.  Offloading is the
crowd action: it is free for the device but all simultaneous offloaders pay a
congestion penalty d(n) = (n-1)**alpha.  All rewards here are costs, to be
minimized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Action",
    "ChainSpec",
    "DeviceModel",
    "DeviceState",
    "penalty",
    "penalty_derivative",
    "local_utility",
    "admissible_actions",
    "next_aoi_battery",
    "step_device",
    "joint_reward",
    "approx_reward",
    "check_crowd_incentive",
    "load_env_config",
    "save_env_config",
]

ROW_SUM_TOL = 1e-12


class Action(IntEnum):
    WAIT = 0
    LOCAL = 1
    OFFLOAD = 2


N_ACTIONS = 3


@dataclass(frozen=True)
class ChainSpec:
    """Finite Markov chain on the integer range {lo..hi}.

    kind "walk" is a birth-death chain: stay with probability 1/2 and move
    +-1 with probability 1/4 each, reflecting at the boundaries (the blocked
    move folds into staying).  kind "iid" redraws uniformly every step.
    """

    lo: int
    hi: int
    kind: str = "walk"

    def __post_init__(self):
        if self.hi < self.lo:
            raise ValueError(f"chain range empty: [{self.lo}, {self.hi}]")
        if self.kind not in ("walk", "iid"):
            raise ValueError(f"unknown chain kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.hi - self.lo + 1

    def values(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1, dtype=np.int64)

    def transition_matrix(self) -> np.ndarray:
        n = self.n
        if n == 1:
            return np.ones((1, 1))
        if self.kind == "iid":
            return np.full((n, n), 1.0 / n)
        p = np.zeros((n, n))
        for i in range(n):
            p[i, i] = 0.5
            if i > 0:
                p[i, i - 1] = 0.25
            else:
                p[i, i] += 0.25
            if i < n - 1:
                p[i, i + 1] = 0.25
            else:
                p[i, i] += 0.25
        return p

    def to_dict(self) -> dict:
        return {"min": self.lo, "max": self.hi, "kind": self.kind}

    @staticmethod
    def from_dict(d: dict) -> "ChainSpec":
        return ChainSpec(int(d["min"]), int(d["max"]), str(d.get("kind", "walk")))


@dataclass(frozen=True)
class DeviceModel:
    """One agent's MDP parameters."""

    aoi_cap: int
    battery_cap: int
    harvest: ChainSpec
    cost: ChainSpec
    penalty_alpha: float
    discount: float

    def __post_init__(self):
        if self.aoi_cap < 2:
            raise ValueError("aoi_cap must be >= 2")
        if self.battery_cap < 1:
            raise ValueError("battery_cap must be >= 1")
        if self.harvest.lo < 0:
            raise ValueError("harvest range must be nonnegative")
        if self.cost.lo < 1:
            raise ValueError("processing cost must be >= 1")
        if self.penalty_alpha <= 0:
            raise ValueError("penalty_alpha must be positive")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie strictly in (0, 1)")
        for name, chain in (("harvest", self.harvest), ("cost", self.cost)):
            rows = chain.transition_matrix().sum(axis=1)
            if np.any(np.abs(rows - 1.0) > ROW_SUM_TOL):
                raise ValueError(f"{name} chain is not row-stochastic")

    @property
    def battery_floor(self) -> int:
        # one task's worst-case deficit; keeps the state space finite
        return -self.cost.hi

    @property
    def theta_max(self) -> float:
        # discounted cost of always offloading
        return 1.0 / (1.0 - self.discount)

    def to_dict(self) -> dict:
        return {
            "M": self.aoi_cap,
            "B": self.battery_cap,
            "harvest": self.harvest.to_dict(),
            "cost": self.cost.to_dict(),
            "alpha": self.penalty_alpha,
            "gamma": self.discount,
        }

    @staticmethod
    def from_dict(d: dict) -> "DeviceModel":
        return DeviceModel(
            aoi_cap=int(d["M"]),
            battery_cap=int(d["B"]),
            harvest=ChainSpec.from_dict(d["harvest"]),
            cost=ChainSpec.from_dict(d["cost"]),
            penalty_alpha=float(d["alpha"]),
            discount=float(d["gamma"]),
        )


@dataclass(frozen=True)
class DeviceState:
    """Per-agent state: AoI x, battery e, and the current harvest/cost values."""

    aoi: int
    battery: int
    harvest: int
    cost: int

    @property
    def pending(self) -> bool:
        # a task is mid-recharge iff the battery is negative
        return self.battery < 0


def penalty(n: float, alpha: float) -> float:
    """Congestion penalty d(n) = (n-1)**alpha for n >= 1; d(1) = 0."""
    if n < 1.0:
        raise ValueError(f"penalty argument must be >= 1, got {n}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return float((n - 1.0) ** alpha)


def penalty_derivative(n: float, alpha: float) -> float:
    """d'(n) = alpha * (n-1)**(alpha-1)."""
    if n < 1.0:
        raise ValueError(f"penalty argument must be >= 1, got {n}")
    base = n - 1.0
    if base == 0.0:
        if alpha == 1.0:
            return 1.0
        return float("inf") if alpha < 1.0 else 0.0
    return float(alpha * base ** (alpha - 1.0))


def local_utility(state: DeviceState) -> float:
    """AoI cost, plus the battery deficit while a task is recharging."""
    return local_utility_xe(state.aoi, state.battery)


def local_utility_xe(aoi: int, battery: int) -> float:
    if battery >= 0:
        return float(aoi)
    return float(aoi - battery)


def admissible_actions(state: DeviceState) -> tuple[Action, ...]:
    if state.pending:
        return (Action.WAIT,)
    return (Action.WAIT, Action.LOCAL, Action.OFFLOAD)


def next_aoi_battery(
    aoi: int, battery: int, harvest: int, cost: int, action: Action, model: DeviceModel
) -> tuple[int, int]:
    """Deterministic (x, e) part of the transition given the current H and C."""
    m, b = model.aoi_cap, model.battery_cap
    if battery < 0:
        if action != Action.WAIT:
            raise ValueError("only WAIT is admissible while a task is recharging")
        e2 = min(battery + harvest, b)
        if e2 >= 0:
            return 1, e2  # pending task completes
        return min(aoi + 1, m), e2
    if action == Action.OFFLOAD:
        return 1, min(battery + harvest, b)
    if action == Action.LOCAL:
        e2 = battery + harvest - cost
        if e2 >= 0:
            return 1, min(e2, b)
        return min(aoi + 1, m), e2  # task pending until the battery recovers
    return min(aoi + 1, m), min(battery + harvest, b)


def _advance_chain(spec: ChainSpec, value: int, rng: np.random.Generator) -> int:
    row = spec.transition_matrix()[value - spec.lo]
    return spec.lo + int(rng.choice(len(row), p=row))


def step_device(
    state: DeviceState, action: Action, model: DeviceModel, rng: np.random.Generator
) -> DeviceState:
    """Advance one device by one timestep.

    The energy update uses the harvest/cost values observed in the current
    state; the chains then advance independently of (x, e, a).
    """
    x2, e2 = next_aoi_battery(
        state.aoi, state.battery, state.harvest, state.cost, action, model
    )
    h2 = _advance_chain(model.harvest, state.harvest, rng)
    c2 = _advance_chain(model.cost, state.cost, rng)
    return DeviceState(aoi=x2, battery=e2, harvest=h2, cost=c2)


def joint_reward(
    states: Sequence[DeviceState], actions: Sequence[Action], alpha: float
) -> float:
    """True joint cost: sum of local utilities plus d(N) paid per offloader."""
    if len(states) != len(actions):
        raise ValueError("states and actions must have equal length")
    n_off = sum(1 for a in actions if a == Action.OFFLOAD)
    total = sum(local_utility(s) for s in states)
    if n_off > 0:
        total += n_off * penalty(float(n_off), alpha)
    return float(total)


def approx_reward(
    state: DeviceState, action: Action, theta_minus_i: float, alpha: float
) -> float:
    """Decomposed cost: the congestion count is replaced by 1 + theta_{-i}.

    theta_minus_i is the sum of the other agents' per-step offload
    frequencies, so the penalty argument stays in [1, N].
    """
    if theta_minus_i < 0:
        raise ValueError("theta_minus_i must be nonnegative")
    value = local_utility(state)
    if action == Action.OFFLOAD:
        value += penalty(1.0 + theta_minus_i, alpha)
    return float(value)


def check_crowd_incentive(
    model: DeviceModel, utility: Callable[[int, int], float] | None = None
) -> bool:
    """Validate that a solitary offload one-step dominates the alternatives.

    For every non-pending (x, e, H, C): offload's next-state utility must be
    strictly better than wait's (the AoI-reset advantage) and weakly dominate
    local processing on (next utility, next battery).  Used to reject
    generated instances for which the crowd action is not individually
    attractive.
    """
    u = utility if utility is not None else local_utility_xe
    for x in range(1, model.aoi_cap + 1):
        for e in range(0, model.battery_cap + 1):
            for h in model.harvest.values():
                for c in model.cost.values():
                    x_off, e_off = next_aoi_battery(x, e, int(h), int(c), Action.OFFLOAD, model)
                    x_wait, e_wait = next_aoi_battery(x, e, int(h), int(c), Action.WAIT, model)
                    x_loc, e_loc = next_aoi_battery(x, e, int(h), int(c), Action.LOCAL, model)
                    if not u(x_off, e_off) < u(x_wait, e_wait):
                        return False
                    if u(x_off, e_off) > u(x_loc, e_loc) or e_off < e_loc:
                        return False
    return True


def load_env_config(path: str | Path) -> dict:
    """Read the environment config JSON and return its dict form.

    Schema: {n_agents, M, B, alpha, gamma, harvest: {min, max, kind},
    cost: {min, max, kind}, seed}.
    """
    with open(path) as fh:
        cfg = json.load(fh)
    required = {"n_agents", "M", "B", "alpha", "gamma", "harvest", "cost", "seed"}
    missing = required - cfg.keys()
    if missing:
        raise ValueError(f"env config missing keys: {sorted(missing)}")
    return cfg


def save_env_config(cfg: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def model_from_env_config(cfg: dict) -> DeviceModel:
    return DeviceModel(
        aoi_cap=int(cfg["M"]),
        battery_cap=int(cfg["B"]),
        harvest=ChainSpec.from_dict(cfg["harvest"]),
        cost=ChainSpec.from_dict(cfg["cost"]),
        penalty_alpha=float(cfg["alpha"]),
        discount=float(cfg["gamma"]),
    )
