"""Fast and intermediate timescales: tabular Q-learning and multiplier ascent.

One constrained evaluation runs `lambda_updates` outer iterations; each does a
block of epsilon-greedy Q-learning steps on the shaped cost r_hat + lambda*c,
then re-estimates the discounted offload cost of the current greedy policy by
Monte Carlo and moves the multiplier by a projected ascent step.  Rewards are
costs throughout, so the Bellman backup takes a min.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cmdp import ProductSpace, build_cmdp, discounted_value
from .env import Action, N_ACTIONS, DeviceModel
from .rollouts import (
    ProductSampler,
    discounted_rollouts,
    factored_policy_value,
    horizon_for,
)

__all__ = [
    "QTable",
    "LagrangeState",
    "TrainParams",
    "TrainResult",
    "shaped_reward",
    "q_update",
    "lambda_update",
    "train_constrained",
]


@dataclass
class QTable:
    q: np.ndarray
    learning_rate: float = 0.5
    exploration_rate: float = 0.05
    exploration_decay: float = 0.95

    def __post_init__(self):
        if not np.all(np.isfinite(self.q)):
            raise ValueError("QTable entries must be finite")
        if not 0.0 <= self.exploration_rate <= 1.0:
            raise ValueError("exploration rate must lie in [0, 1]")


@dataclass
class LagrangeState:
    lam: float = 0.0
    eta0: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("the multiplier must be nonnegative")

    def eta(self, k: int) -> float:
        return self.eta0 / (1.0 + k)


def shaped_reward(r_hat: float, c: float, lam: float) -> float:
    """Cost optimized on the fastest timescale: r_hat + lam * c."""
    if lam < 0:
        raise ValueError("the multiplier must be nonnegative")
    return r_hat + lam * c


def q_update(
    qt: QTable,
    s: int,
    a: int,
    r_total: float,
    s_next: int,
    gamma: float,
    admissible_next: np.ndarray,
) -> QTable:
    """One tabular backup; min over next actions because rewards are costs."""
    nxt = qt.q[s_next][admissible_next].min()
    qt.q[s, a] += qt.learning_rate * (r_total + gamma * nxt - qt.q[s, a])
    return qt


def lambda_update(ls: LagrangeState, k_hat: float, theta_i: float, k: int) -> LagrangeState:
    """Projected ascent on the constraint violation K_hat - theta_i."""
    if k_hat < 0:
        raise ValueError("K_hat is a discounted cost and must be nonnegative")
    lam = max(0.0, ls.lam + ls.eta(k) * (k_hat - theta_i))
    return LagrangeState(lam=lam, eta0=ls.eta0)


@dataclass
class TrainParams:
    budget: int = 100_000
    lambda_updates: int = 25
    learning_rate: float = 0.5
    # multiplicative per-outer-iteration decay; 1.0 keeps the rate flat
    learning_rate_decay: float = 1.0
    exploration: float = 0.05
    exploration_decay: float = 0.95
    lagrange_step0: float = 1.0
    rollouts: int = 32
    final_rollouts: int = 128
    horizon_tail: float = 1e-3
    exact_eval_cap: int = 600
    # observe_chains=False learns a table over (aoi, battery) only, treating
    # the harvest/cost chains as exogenous randomness; the learned policy is
    # lifted to the full state space for evaluation
    observe_chains: bool = True
    # exact factored evaluation of the returned (J, K): removes estimator
    # noise from the values the slow timescale differences
    exact_factored_eval: bool = False
    # return the best feasible greedy snapshot across the multiplier updates
    # instead of the last iterate: primal-dual last iterates oscillate around
    # the budget boundary, the best feasible one respects it
    best_feasible_policy: bool = False


@dataclass
class TrainResult:
    greedy: np.ndarray
    space: ProductSpace
    qtable: QTable
    lam: float
    j_hat: float
    k_hat: float
    j_tilde: float
    theta_i: float
    theta_minus_freq: float
    exact_eval: bool
    telemetry: list[dict] = field(default_factory=list)

    def policy_on(self, cmdp) -> np.ndarray:
        """Deterministic policy table on a compact CMDP of the same model."""
        table = np.zeros((cmdp.n_states, N_ACTIONS))
        for i, state in enumerate(cmdp.states):
            table[i, int(self.greedy[self.space.index(*state)])] = 1.0
        return table


def _greedy_actions(q: np.ndarray, admissible: np.ndarray) -> np.ndarray:
    masked = np.where(admissible, q, np.inf)
    return masked.argmin(axis=1).astype(np.int64)


def _lift(greedy_obs: np.ndarray, obs_div: int) -> np.ndarray:
    """Expand an (aoi, battery)-level policy onto the full product space."""
    if obs_div == 1:
        return greedy_obs
    return np.repeat(greedy_obs, obs_div)


def _estimate(space, sampler, greedy, reward, start, gamma, n_rollouts, horizon, rng):
    j, k = discounted_rollouts(
        sampler, greedy, reward, space.COST, start, gamma, n_rollouts, horizon, rng
    )
    return float(j.mean()), float(k.mean())


def train_constrained(
    model: DeviceModel,
    theta_i: float,
    theta_minus_freq: float,
    *,
    params: TrainParams,
    rng: np.random.Generator,
    agent_id: int = 0,
    beta_state: tuple[int, int, int, int] | None = None,
    q_init: np.ndarray | None = None,
    lambda_init: float = 0.0,
) -> TrainResult:
    """Constrained evaluation: Q-learning inner loop, multiplier outer loop.

    theta_i is the budget in discounted units; theta_minus_freq is the other
    agents' summed per-step offload frequency (fixes the congestion term).
    A zero budget is enforced by masking the offload action outright instead
    of letting the multiplier diverge.  q_init/lambda_init continue training
    from an earlier evaluation (the policies persist across the slow
    timescale).
    """
    if params.budget < params.lambda_updates:
        raise ValueError(
            f"budget {params.budget} cannot cover {params.lambda_updates} outer iterations"
        )
    if theta_i < 0:
        raise ValueError("theta_i must be nonnegative")
    space = ProductSpace.for_model(model)
    gamma = model.discount
    reward = space.reward_table(theta_minus_freq)
    masked = theta_i == 0.0
    nC, nH, nHC = space.nC, space.nH, space.nH * space.nC
    # the learner's observation: the full chain-augmented state, or just
    # (aoi, battery) with the chains left as environment randomness
    obs_div = 1 if params.observe_chains else nHC
    n_obs = space.n_states // obs_div
    obs_admissible = space.ADM[::obs_div].copy()
    obs_reward = reward[::obs_div]
    if masked:
        obs_admissible[:, Action.OFFLOAD] = False

    if q_init is not None and q_init.shape != (n_obs, N_ACTIONS):
        raise ValueError("q_init shape does not match the observation space")
    qt = QTable(
        q=np.zeros((n_obs, N_ACTIONS)) if q_init is None else q_init.copy(),
        learning_rate=params.learning_rate,
        exploration_rate=params.exploration,
        exploration_decay=params.exploration_decay,
    )
    lagrange = LagrangeState(lam=lambda_init, eta0=params.lagrange_step0)
    sampler = ProductSampler(space)
    start = space.start_index(beta_state)
    horizon = horizon_for(gamma, params.horizon_tail)
    steps_per_block = params.budget // params.lambda_updates

    # flat-list mirrors of the hot tables: the inner loop is pure Python
    q_flat = qt.q.ravel().tolist()
    r_flat = obs_reward.ravel().tolist()
    next_xe = space.NEXT_XE.ravel().tolist()
    adm_lists = [tuple(np.nonzero(obs_admissible[s])[0].tolist()) for s in range(n_obs)]
    hcum_rows = [tuple(space.HCUM[i].tolist()) for i in range(nH)]
    ccum_rows = [tuple(space.CCUM[i].tolist()) for i in range(nC)]
    offload = int(Action.OFFLOAD)

    telemetry: list[dict] = []
    candidates: list[tuple[float, int, np.ndarray]] = []
    state = start
    hi = (start // nC) % nH
    ci = start % nC
    steps_since_reset = 0
    for k in range(params.lambda_updates):
        eps = params.exploration * params.exploration_decay**k
        lr = params.learning_rate * params.learning_rate_decay**k
        lam = lagrange.lam
        u_explore = rng.random(steps_per_block)
        u_pick = rng.random(steps_per_block)
        u_h = rng.random(steps_per_block)
        u_c = rng.random(steps_per_block)
        for t in range(steps_per_block):
            if steps_since_reset >= horizon:
                state, steps_since_reset = start, 0
                hi = (start // nC) % nH
                ci = start % nC
            obs = state // obs_div
            acts = adm_lists[obs]
            if u_explore[t] < eps:
                a = acts[int(u_pick[t] * len(acts))]
            else:
                base = obs * 3
                a = acts[0]
                best = q_flat[base + a]
                for cand in acts[1:]:
                    val = q_flat[base + cand]
                    if val < best:
                        best, a = val, cand
            r_total = r_flat[obs * 3 + a]
            if a == offload:
                r_total += lam
            # advance: deterministic (x, e) part plus independent chain moves
            row = hcum_rows[hi]
            u = u_h[t]
            h2 = 0
            while row[h2] < u:
                h2 += 1
            row = ccum_rows[ci]
            u = u_c[t]
            c2 = 0
            while row[c2] < u:
                c2 += 1
            nxt = next_xe[state * 3 + a] * nHC + h2 * nC + c2
            nxt_obs = nxt // obs_div
            base = nxt_obs * 3
            nacts = adm_lists[nxt_obs]
            best = q_flat[base + nacts[0]]
            for cand in nacts[1:]:
                val = q_flat[base + cand]
                if val < best:
                    best = val
            idx = obs * 3 + a
            q_flat[idx] += lr * (r_total + gamma * best - q_flat[idx])
            state, hi, ci = nxt, h2, c2
            steps_since_reset += 1

        qt.q = np.array(q_flat).reshape(n_obs, N_ACTIONS)
        greedy_obs = _greedy_actions(qt.q, obs_admissible)
        greedy = _lift(greedy_obs, obs_div)
        j_est, k_hat = _estimate(
            space, sampler, greedy, reward, start, gamma,
            params.rollouts, horizon, rng,
        )
        if masked:
            k_hat = 0.0  # offload is inadmissible, the estimate is exact
        if params.best_feasible_policy and k_hat <= theta_i:
            candidates.append((j_est, k, greedy_obs.copy()))
        telemetry.append(
            {
                "agent_id": agent_id,
                "outer_iter": k,
                "lambda": lagrange.lam,
                "J_hat": j_est,
                "K_hat": k_hat,
                "epsilon": eps,
            }
        )
        lagrange = lambda_update(lagrange, k_hat, theta_i, k)

    qt.q = np.array(q_flat).reshape(n_obs, N_ACTIONS)
    qt.exploration_rate = params.exploration * params.exploration_decay ** (
        params.lambda_updates - 1
    )

    exact = space.n_states <= params.exact_eval_cap

    def evaluate(lifted: np.ndarray) -> tuple[float, float]:
        if exact:
            cmdp = build_cmdp(model, theta_i, theta_minus_freq, beta_state=beta_state)
            table = np.zeros((cmdp.n_states, N_ACTIONS))
            for i, st in enumerate(cmdp.states):
                table[i, int(lifted[space.index(*st)])] = 1.0
            return discounted_value(cmdp, table)
        if params.exact_factored_eval:
            return factored_policy_value(space, lifted, reward, start)
        return _estimate(
            space, sampler, lifted, reward, start, gamma,
            params.final_rollouts, horizon, rng,
        )

    greedy = _lift(_greedy_actions(qt.q, obs_admissible), obs_div)
    j_hat, k_hat = evaluate(greedy)
    if params.best_feasible_policy and candidates:
        slack = 0.04 * (1.0 / (1.0 - gamma))
        if k_hat > theta_i + slack:
            # walk the feasible snapshots from best estimated value down
            for j_est, _, snapshot in sorted(candidates, key=lambda c: c[0])[:4]:
                lifted = _lift(snapshot, obs_div)
                j_cand, k_cand = evaluate(lifted)
                if k_cand <= theta_i + slack:
                    greedy, j_hat, k_hat = lifted, j_cand, k_cand
                    break
                if k_cand < k_hat:
                    greedy, j_hat, k_hat = lifted, j_cand, k_cand
    exact = exact or params.exact_factored_eval
    j_tilde = j_hat + lagrange.lam * (k_hat - theta_i)
    return TrainResult(
        greedy=greedy,
        space=space,
        qtable=qt,
        lam=lagrange.lam,
        j_hat=j_hat,
        k_hat=k_hat,
        j_tilde=j_tilde,
        theta_i=theta_i,
        theta_minus_freq=theta_minus_freq,
        exact_eval=exact,
        telemetry=telemetry,
    )
