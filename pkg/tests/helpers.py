"""Independent oracles shared by the test suite (kept out of the package)."""

import numpy as np

from dcc.cmdp import TabularCmdp
from dcc.env import N_ACTIONS


def value_iteration(
    cmdp: TabularCmdp,
    reward: np.ndarray | None = None,
    lam: float = 0.0,
    tol: float = 1e-12,
    max_iter: int = 200_000,
):
    """Optimal cost-to-go and greedy policy by plain Bellman iteration.

    Minimizes reward + lam * cost.  Independent of the package's exact
    policy-evaluation path.
    """
    r = cmdp.reward if reward is None else reward
    shaped = r + lam * cmdp.cost
    n = cmdp.n_states
    v = np.zeros(n)
    rows = [
        [cmdp.kernel_row(s, a) if cmdp.admissible[s, a] else None for a in range(N_ACTIONS)]
        for s in range(n)
    ]
    for _ in range(max_iter):
        q = np.full((n, N_ACTIONS), np.inf)
        for s in range(n):
            for a in range(N_ACTIONS):
                if rows[s][a] is not None:
                    idxs, probs = rows[s][a]
                    q[s, a] = shaped[s, a] + cmdp.gamma * float(probs @ v[idxs])
        v_new = q.min(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    greedy = q.argmin(axis=1)
    return v, greedy, q


def mc_discounted(cmdp, policy_actions, rng, n_rollouts=64, horizon=300):
    """Monte Carlo (J, K) estimates for a deterministic policy, plus J's SE."""
    n = cmdp.n_states
    start = int(np.argmax(cmdp.beta))
    js, ks = [], []
    for _ in range(n_rollouts):
        s = start
        j = k = 0.0
        g = 1.0
        for _ in range(horizon):
            a = int(policy_actions[s])
            j += g * cmdp.reward[s, a]
            k += g * cmdp.cost[s, a]
            idxs, probs = cmdp.kernel_row(s, a)
            s = int(rng.choice(idxs, p=probs))
            g *= cmdp.gamma
        js.append(j)
        ks.append(k)
    js, ks = np.array(js), np.array(ks)
    return (
        float(js.mean()),
        float(ks.mean()),
        float(js.std(ddof=1) / np.sqrt(n_rollouts)),
        float(ks.std(ddof=1) / np.sqrt(n_rollouts)),
    )
