"""Independent Q-learning baselines against the true joint environment.

Selfish IQL: each agent learns from its own reward slice, the local utility
plus the realized congestion penalty d(N) when it offloaded; it never sees
other agents' states, actions, or tables, only that penalty through its own
reward.  The common-reward variant feeds every agent the full joint reward
instead.  Stepping is lockstep-synchronous; per-agent randomness comes from
streams derived from (seed, agent id).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cmdp import ProductSpace
from .env import Action, N_ACTIONS, DeviceModel
from .rollouts import ProductSampler, horizon_for, joint_true_rollouts

__all__ = ["IqlParams", "IqlReport", "train_iql", "train_iql_common"]


@dataclass
class IqlParams:
    learning_rate: float = 0.05
    exploration: float = 0.05
    exploration_decay: float = 0.95
    decay_every: int = 2000
    eval_rollouts: int = 64
    horizon_tail: float = 1e-3
    # False: tables over (aoi, battery) only, chains stay exogenous
    observe_chains: bool = True


@dataclass
class IqlReport:
    seed: int
    variant: str
    n_agents: int
    models: list[dict]
    series: list[dict] = field(default_factory=list)
    signal_variances: list[float] = field(default_factory=list)
    final_greedy: list[np.ndarray] = field(default_factory=list)

    @property
    def final_joint(self) -> float:
        return self.series[-1]["joint_true_reward"]

    @property
    def final_offload_frequency(self) -> float:
        return self.series[-1]["offload_frequency"]

    @property
    def mean_signal_variance(self) -> float:
        return float(np.mean(self.signal_variances))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "variant": self.variant,
            "n_agents": self.n_agents,
            "models": self.models,
            "series": self.series,
            "signal_variances": self.signal_variances,
        }


def _greedy_eval(models, spaces, greedy, alpha, n_rollouts, rng):
    samplers = [ProductSampler(s) for s in spaces]
    utilities = [s.U for s in spaces]
    starts = [s.start_index() for s in spaces]
    gamma = models[0].discount
    return joint_true_rollouts(
        samplers, greedy, utilities, alpha, starts,
        gamma, n_rollouts, horizon_for(gamma), rng,
    )


def train_iql(
    models: list[DeviceModel],
    *,
    seed: int,
    total_joint_steps: int,
    params: IqlParams | None = None,
    common_reward: bool = False,
    eval_every: int | None = None,
) -> IqlReport:
    """Run IQL on the joint environment; evaluates greedy policies periodically."""
    if not models:
        raise ValueError("at least one agent model is required")
    params = params or IqlParams()
    alpha = models[0].penalty_alpha
    gamma = models[0].discount
    n_agents = len(models)
    eval_every = eval_every or max(1, total_joint_steps // 10)
    spaces = [ProductSpace.for_model(m) for m in models]
    report = IqlReport(
        seed=seed,
        variant="iql-common" if common_reward else "iql",
        n_agents=n_agents,
        models=[m.to_dict() for m in models],
    )

    # flat per-agent working sets; the joint loop is pure Python
    obs_div = [1 if params.observe_chains else s.nH * s.nC for s in spaces]
    n_obs = [s.n_states // obs_div[i] for i, s in enumerate(spaces)]
    q = [np.zeros(n_obs[i] * N_ACTIONS).tolist() for i in range(n_agents)]
    u_flat = [s.U[:: obs_div[i]].tolist() for i, s in enumerate(spaces)]
    next_xe = [s.NEXT_XE.ravel().tolist() for s in spaces]
    adm = [
        [
            tuple(np.nonzero(s.ADM[j * obs_div[i]])[0].tolist())
            for j in range(n_obs[i])
        ]
        for i, s in enumerate(spaces)
    ]
    hcums = [[tuple(row) for row in s.HCUM] for s in spaces]
    ccums = [[tuple(row) for row in s.CCUM] for s in spaces]
    nc = [s.nC for s in spaces]
    nh = [s.nH for s in spaces]
    nhc = [s.nH * s.nC for s in spaces]
    states = [s.start_index() for s in spaces]
    his = [(states[i] // nc[i]) % nh[i] for i in range(n_agents)]
    cis = [states[i] % nc[i] for i in range(n_agents)]
    rngs = [
        np.random.default_rng(np.random.SeedSequence((seed, 0x1A, i)))
        for i in range(n_agents)
    ]
    eval_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x1B)))
    lr = params.learning_rate
    eps = params.exploration
    offload = int(Action.OFFLOAD)
    horizon = horizon_for(gamma, params.horizon_tail)

    # reward-signal moments per agent (learning-signal variance, Welford)
    sig_n = [0] * n_agents
    sig_mean = [0.0] * n_agents
    sig_m2 = [0.0] * n_agents

    block = 4096
    u_draws = [rngs[i].random((4, block)) for i in range(n_agents)]
    cursor = block
    actions = [0] * n_agents
    steps_since_reset = 0

    def snapshot_greedy():
        out = []
        for i, s in enumerate(spaces):
            table = np.array(q[i]).reshape(n_obs[i], N_ACTIONS)
            masked = np.where(s.ADM[:: obs_div[i]], table, np.inf)
            greedy = masked.argmin(axis=1).astype(np.int64)
            out.append(np.repeat(greedy, obs_div[i]) if obs_div[i] > 1 else greedy)
        return out

    def record(step):
        greedy = snapshot_greedy()
        out = _greedy_eval(models, spaces, greedy, alpha, params.eval_rollouts, eval_rng)
        report.series.append(
            {
                "step": step,
                "joint_true_reward": float(out["returns"].mean()),
                "joint_true_se": float(
                    out["returns"].std(ddof=1) / math.sqrt(len(out["returns"]))
                ),
                "offload_frequency": float(out["offload_frequency"]),
            }
        )
        return greedy

    for t in range(total_joint_steps):
        if cursor >= block:
            u_draws = [rngs[i].random((4, block)) for i in range(n_agents)]
            cursor = 0
        if steps_since_reset >= horizon:
            states = [s.start_index() for s in spaces]
            his = [(states[i] // nc[i]) % nh[i] for i in range(n_agents)]
            cis = [states[i] % nc[i] for i in range(n_agents)]
            steps_since_reset = 0
        n_off = 0
        for i in range(n_agents):
            obs_i = states[i] // obs_div[i]
            acts = adm[i][obs_i]
            if u_draws[i][0][cursor] < eps:
                a = acts[int(u_draws[i][1][cursor] * len(acts))]
            else:
                qi = q[i]
                base = obs_i * 3
                a = acts[0]
                best = qi[base + a]
                for cand in acts[1:]:
                    val = qi[base + cand]
                    if val < best:
                        best, a = val, cand
            actions[i] = a
            if a == offload:
                n_off += 1
        pen = float(max(n_off - 1, 0)) ** alpha if n_off > 0 else 0.0
        if common_reward:
            joint_r = sum(
                u_flat[i][states[i] // obs_div[i]] for i in range(n_agents)
            ) + n_off * pen
        for i in range(n_agents):
            s_i = states[i]
            obs_i = s_i // obs_div[i]
            a = actions[i]
            if common_reward:
                r = joint_r
            else:
                r = u_flat[i][obs_i]
                if a == offload:
                    r += pen
            sig_n[i] += 1
            delta = r - sig_mean[i]
            sig_mean[i] += delta / sig_n[i]
            sig_m2[i] += delta * (r - sig_mean[i])
            # advance the device
            row = hcums[i][his[i]]
            u = u_draws[i][2][cursor]
            h2 = 0
            while row[h2] < u:
                h2 += 1
            row = ccums[i][cis[i]]
            u = u_draws[i][3][cursor]
            c2 = 0
            while row[c2] < u:
                c2 += 1
            nxt = next_xe[i][s_i * 3 + a] * nhc[i] + h2 * nc[i] + c2
            nxt_obs = nxt // obs_div[i]
            qi = q[i]
            base = nxt_obs * 3
            nacts = adm[i][nxt_obs]
            best = qi[base + nacts[0]]
            for cand in nacts[1:]:
                val = qi[base + cand]
                if val < best:
                    best = val
            idx = obs_i * 3 + a
            qi[idx] += lr * (r + gamma * best - qi[idx])
            states[i], his[i], cis[i] = nxt, h2, c2
        cursor += 1
        steps_since_reset += 1
        if (t + 1) % params.decay_every == 0:
            eps *= params.exploration_decay
        if (t + 1) % eval_every == 0:
            record(t + 1)

    if not report.series or report.series[-1]["step"] != total_joint_steps:
        record(total_joint_steps)
    report.final_greedy = snapshot_greedy()
    report.signal_variances = [
        sig_m2[i] / max(sig_n[i] - 1, 1) for i in range(n_agents)
    ]
    return report


def train_iql_common(models, *, seed, total_joint_steps, params=None, eval_every=None):
    """IQL with the full joint reward as every agent's learning signal."""
    return train_iql(
        models,
        seed=seed,
        total_joint_steps=total_joint_steps,
        params=params,
        common_reward=True,
        eval_every=eval_every,
    )
