"""Slow timescale: finite-difference optimization of the shared budgets.

Each slow iteration evaluates, per agent, the Lagrangian value at the current
budgets, at a forward-perturbed own budget, and at a forward-perturbed sum of
the others' budgets (three evaluations per agent regardless of system size).
The per-agent partials assemble into the full gradient through the chain-rule
identity g_i = local_i + sum_{j != i} coupling_j, and the budget vector takes
a projected descent step.  Perturbations are one-sided positive, sampled per
agent and clipped away from zero; all three evaluations of a triple share one
seed (common random numbers).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cmdp import ConstraintVector, ProductSpace, build_cmdp, theta_max_for
from .env import DeviceModel
from .lp_oracle import CmdpLp, policy_from_occupancy
from .rollouts import CompactSampler, ProductSampler, horizon_for, joint_true_rollouts
from .solver_ql import TrainParams, train_constrained

__all__ = [
    "SlowSchedule",
    "EvaluationTriple",
    "GradientEstimate",
    "RunReport",
    "evaluate_triple",
    "assemble_gradient",
    "theta_step",
    "run_dcc",
]


@dataclass(frozen=True)
class SlowSchedule:
    """Step and perturbation sequences for the budget iteration.

    Constant mode reproduces the short 5-improvement runs; decaying mode uses
    a_n = step0/(n+1)**step_exponent and c_n = perturb0/(n+1)**perturb_exponent,
    whose exponents satisfy sum a_n = inf and sum (a_n/c_n)^2 < inf.
    step_cap clips each component's move per iteration: early stochastic
    gradients through the 1/eps divided differences can be orders of
    magnitude off, and an uncapped step slams the budgets into a bound they
    cannot recover from within a short run.
    """

    step0: float = 0.25
    perturb0: float = 0.05
    step_exponent: float = 1.0
    perturb_exponent: float = 0.25
    constant: bool = True
    step_cap: float | None = 2.0
    # perturbation sizes are drawn in normalized budget units (theta/theta_max)
    # and scaled up: divided differences of the stochastic evaluations need
    # steps comparable to the estimator noise, not infinitesimal ones
    perturb_normalized: bool = True

    def step(self, n: int) -> float:
        if self.constant:
            return self.step0
        return self.step0 / (n + 1.0) ** self.step_exponent

    def sigma(self, n: int) -> float:
        if self.constant:
            return self.perturb0
        return self.perturb0 / (n + 1.0) ** self.perturb_exponent

    def series_conditions_hold(self) -> bool:
        """Divergent steps, square-summable step/perturbation ratios."""
        diverges = self.step_exponent <= 1.0
        ratio_summable = 2.0 * (self.step_exponent - self.perturb_exponent) > 1.0
        return diverges and ratio_summable


@dataclass
class EvaluationTriple:
    agent: int
    epsilon: float
    base: float
    local: float
    coupling: float
    j_hat: float
    k_hat: float
    lam: float
    policy: np.ndarray = field(repr=False)
    telemetry: list = field(default_factory=list, repr=False)
    q_final: np.ndarray | None = field(default=None, repr=False)


@dataclass
class GradientEstimate:
    local: np.ndarray
    coupling: np.ndarray
    gradient: np.ndarray


def _derive_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, *key)))


def evaluate_triple(
    model: DeviceModel,
    theta: ConstraintVector,
    agent: int,
    eps: float,
    *,
    backend: str = "ql",
    params: TrainParams | None = None,
    seed: int = 0,
    lambda_shortcut: bool = False,
    direction: str = "forward",
    q_init: np.ndarray | None = None,
    lambda_init: float = 0.0,
) -> EvaluationTriple:
    """Three constrained evaluations for one agent at budgets theta.

    The coupling evaluation shifts the other agents' budget sum by eps in
    budget units, i.e. the congestion-frequency argument by eps/theta_max.
    With `lambda_shortcut` the own-budget evaluation is skipped and the local
    slope is taken from the base multiplier (local value synthesized as
    base - eps * lambda).  With direction "backward" the own budget is
    perturbed to theta_i - eps (used when an iterate sits at theta_max) and
    the local value is reflected so downstream forward differences still
    estimate the same slope.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    theta_i = float(theta.theta[agent])
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    if direction == "forward" and theta_i + eps > theta.theta_max + 1e-12:
        raise ValueError("theta_i + eps exceeds theta_max")
    if direction == "backward" and theta_i - eps < -1e-12:
        raise ValueError("theta_i - eps is negative")
    own_budget = theta_i + eps if direction == "forward" else theta_i - eps
    freq = theta.freq_sum_excluding(agent)
    freq_eps = eps / theta.theta_max
    degenerate = eps == 0.0
    if backend == "lp":
        cmdp = build_cmdp(model, theta_i, freq)
        lp = CmdpLp(cmdp)
        base = lp.solve(theta_i)
        if degenerate:
            local_value = coup_value = base.objective
        else:
            if lambda_shortcut:
                local_value = base.objective - eps * base.lambda_star
            else:
                local_value = lp.solve(own_budget, initial_basis=base.basis).objective
                if direction == "backward":
                    local_value = 2.0 * base.objective - local_value
            coup_value = lp.solve(
                theta_i, congestion_freq=freq + freq_eps, initial_basis=base.basis
            ).objective
        return EvaluationTriple(
            agent=agent,
            epsilon=eps,
            base=base.objective,
            local=local_value,
            coupling=coup_value,
            j_hat=base.objective,
            k_hat=base.cost_value,
            lam=base.lambda_star,
            policy=policy_from_occupancy(cmdp, base),
        )
    if backend != "ql":
        raise ValueError(f"unknown backend {backend!r}")
    params = params or TrainParams()
    common = dict(params=params, agent_id=agent, q_init=q_init, lambda_init=lambda_init)
    base = train_constrained(
        model, theta_i, freq, rng=_derive_rng(seed, 0), **common
    )
    if degenerate:
        local_value = coup_value = base.j_tilde
    else:
        if lambda_shortcut:
            local_value = base.j_tilde - eps * base.lam
        else:
            local = train_constrained(
                model, own_budget, freq, rng=_derive_rng(seed, 0), **common
            )
            local_value = local.j_tilde
            if direction == "backward":
                local_value = 2.0 * base.j_tilde - local_value
        coup_value = train_constrained(
            model, theta_i, freq + freq_eps, rng=_derive_rng(seed, 0), **common
        ).j_tilde
    return EvaluationTriple(
        agent=agent,
        epsilon=eps,
        base=base.j_tilde,
        local=local_value,
        coupling=coup_value,
        j_hat=base.j_hat,
        k_hat=base.k_hat,
        lam=base.lam,
        policy=base.greedy,
        telemetry=base.telemetry,
        q_final=base.qtable.q,
    )


def assemble_gradient(triples: list[EvaluationTriple], eps) -> GradientEstimate:
    """Combine per-agent partials into the budget gradient.

    local_i and coupling_i are forward differences; the full component is
    g_i = local_i + sum over j != i of coupling_j.
    """
    n = len(triples)
    eps_arr = np.broadcast_to(np.asarray(eps, dtype=float), (n,))
    local = np.empty(n)
    coupling = np.empty(n)
    for i, t in enumerate(triples):
        if abs(t.epsilon - eps_arr[i]) > 1e-15:
            raise ValueError(
                f"triple {i} was evaluated at eps={t.epsilon}, not {eps_arr[i]}"
            )
        local[i] = (t.local - t.base) / eps_arr[i]
        coupling[i] = (t.coupling - t.base) / eps_arr[i]
    total_coupling = coupling.sum()
    gradient = local + (total_coupling - coupling)
    return GradientEstimate(local=local, coupling=coupling, gradient=gradient)


def project_gradient(
    grad: GradientEstimate,
    theta: ConstraintVector,
    k_hats: np.ndarray,
    alpha: float,
) -> GradientEstimate:
    """Project the estimated partials onto their theoretically valid ranges.

    The local slope of an optimal constrained value is -lambda* <= 0 and the
    coupling slope is the discounted offload cost times d'(1 + freq_sum)/
    theta_max (envelope form, nonnegative).  Divided differences of noisy
    trained evaluations can leave these ranges by orders of magnitude; the
    true values cannot, so clipping to [0, 2x envelope] (coupling) and
    (-inf, 0] (local) suppresses estimator noise without touching the signal.
    """
    from .env import penalty_derivative

    freqs = theta.frequencies()
    total = freqs.sum()
    n = theta.n
    local = np.minimum(grad.local, 0.0)
    coupling = grad.coupling.copy()
    for j in range(n):
        slope = penalty_derivative(1.0 + (total - freqs[j]), alpha)
        if np.isfinite(slope):
            bound = 2.0 * max(k_hats[j], 0.0) * slope / theta.theta_max
            coupling[j] = min(max(coupling[j], 0.0), bound)
        else:
            coupling[j] = max(coupling[j], 0.0)
    gradient = local + (coupling.sum() - coupling)
    return GradientEstimate(local=local, coupling=coupling, gradient=gradient)


def theta_step(
    theta: ConstraintVector, g: GradientEstimate, n: int, schedule: SlowSchedule
) -> ConstraintVector:
    """Projected descent step: clamp componentwise to [0, theta_max]."""
    step = schedule.step(n)
    move = step * g.gradient
    if schedule.step_cap is not None:
        move = np.clip(move, -schedule.step_cap, schedule.step_cap)
    new = np.clip(theta.theta - move, 0.0, theta.theta_max)
    return ConstraintVector(new, theta.theta_max)


def _draw_epsilons(
    theta: ConstraintVector, schedule: SlowSchedule, n_iter: int, rng: np.random.Generator
) -> np.ndarray:
    """One-sided perturbation sizes, clipped away from zero at sigma/10."""
    sigma = schedule.sigma(n_iter)
    if schedule.perturb_normalized:
        sigma *= theta.theta_max
    eps = np.abs(rng.normal(0.0, sigma, size=theta.n))
    eps = np.maximum(eps, sigma / 10.0)
    return np.minimum(eps, theta.theta_max)


def _triple_task(args):
    model, theta, i, eps, backend, params, seed, shortcut, q_init, lam_init = args
    direction = "forward"
    if float(theta.theta[i]) + eps > theta.theta_max:
        direction = "backward"  # iterate is pinned at the cap
    return evaluate_triple(
        model, theta, i, eps,
        backend=backend, params=params, seed=seed, lambda_shortcut=shortcut,
        direction=direction, q_init=q_init, lambda_init=lam_init,
    )


@dataclass
class RunReport:
    seed: int
    backend: str
    n_agents: int
    theta_max: float
    models: list[dict]
    iterations: list[dict] = field(default_factory=list)
    telemetry: list[dict] = field(default_factory=list)

    @property
    def baseline_joint(self) -> float:
        return self.iterations[0]["joint_true_reward"]

    @property
    def final_joint(self) -> float:
        return self.iterations[-1]["joint_true_reward"]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "backend": self.backend,
            "n_agents": self.n_agents,
            "theta_max": self.theta_max,
            "models": self.models,
            "iterations": self.iterations,
        }


def _joint_eval(models, policies, *, backend, n_rollouts, rng, cmdps=None):
    """Monte Carlo joint-environment evaluation of the composed policies."""
    gamma = models[0].discount
    horizon = horizon_for(gamma)
    if backend == "lp":
        samplers = [CompactSampler(c) for c in cmdps]
        utilities = []
        starts = []
        for c in cmdps:
            u = np.array([float(x) if e >= 0 else float(x - e) for x, e, _, _ in c.states])
            utilities.append(u)
            starts.append(int(np.argmax(c.beta)))
    else:
        spaces = [ProductSpace.for_model(m) for m in models]
        samplers = [ProductSampler(s) for s in spaces]
        utilities = [s.U for s in spaces]
        starts = [s.start_index() for s in spaces]
    out = joint_true_rollouts(
        samplers, policies, utilities, models[0].penalty_alpha, starts,
        gamma, n_rollouts, horizon, rng,
    )
    return out


def run_dcc(
    models: list[DeviceModel],
    *,
    seed: int,
    n_iterations: int = 5,
    theta0: float | np.ndarray = 0.0,
    schedule: SlowSchedule | None = None,
    params: TrainParams | None = None,
    backend: str = "ql",
    eval_rollouts: int = 64,
    lambda_shortcut: bool = False,
    project_gradients: bool = True,
    workers: int = 1,
) -> RunReport:
    """Full three-timescale run; returns the iteration-by-iteration report.

    Iteration n logs the budgets theta_n and the policies trained at them
    (so iteration 0 is the theta0 baseline), then takes the descent step.
    """
    if not models:
        raise ValueError("at least one agent model is required")
    gamma = models[0].discount
    if any(m.discount != gamma for m in models):
        raise ValueError("all agents must share the discount factor")
    theta_max = theta_max_for(gamma)
    schedule = schedule or SlowSchedule()
    params = params or TrainParams()
    n = len(models)
    theta = ConstraintVector(np.broadcast_to(np.asarray(theta0, dtype=float), (n,)).copy(), theta_max)
    report = RunReport(
        seed=seed,
        backend=backend,
        n_agents=n,
        theta_max=theta_max,
        models=[m.to_dict() for m in models],
    )
    eps_rng = _derive_rng(seed, 0xE95)
    q_store: list[np.ndarray | None] = [None] * n
    lam_store = [0.0] * n
    for it in range(n_iterations + 1):
        final_point = it == n_iterations
        if final_point:
            # trailing evaluation at the post-update budgets (no gradient)
            eps = np.zeros(n)
        else:
            eps = _draw_epsilons(theta, schedule, it, eps_rng)
        tasks = [
            (models[i], theta, i, float(eps[i]), backend, params,
             int(np.random.SeedSequence((seed, it, i)).generate_state(1)[0]),
             lambda_shortcut, q_store[i], lam_store[i])
            for i in range(n)
        ]
        try:
            if workers > 1 and not final_point:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    triples = list(pool.map(_triple_task, tasks))
            else:
                triples = [_triple_task(t) for t in tasks]
        except Exception as exc:
            raise RuntimeError(f"slow iteration {it} failed: {exc}") from exc

        cmdps = None
        if backend == "lp":
            cmdps = [
                build_cmdp(models[i], float(theta.theta[i]), theta.freq_sum_excluding(i))
                for i in range(n)
            ]
        joint = _joint_eval(
            models, [t.policy for t in triples],
            backend=backend, n_rollouts=eval_rollouts,
            rng=_derive_rng(seed, 0x10E, it), cmdps=cmdps,
        )
        record = {
            "iteration": it,
            "theta": theta.theta.tolist(),
            "epsilon": eps.tolist(),
            "agent_j": [t.j_hat for t in triples],
            "agent_k": [t.k_hat for t in triples],
            "agent_lambda": [t.lam for t in triples],
            "agent_j_tilde": [t.base for t in triples],
            "joint_true_reward": float(joint["returns"].mean()),
            "joint_true_se": float(
                joint["returns"].std(ddof=1) / math.sqrt(len(joint["returns"]))
            ),
            "offload_frequency": float(joint["offload_frequency"]),
        }
        if not final_point:
            grad = assemble_gradient(triples, eps)
            if project_gradients:
                grad = project_gradient(
                    grad, theta, np.array([t.k_hat for t in triples]),
                    models[0].penalty_alpha,
                )
            record["gradient"] = grad.gradient.tolist()
            record["local"] = grad.local.tolist()
            record["coupling"] = grad.coupling.tolist()
        report.iterations.append(record)
        for t in triples:
            for row in t.telemetry:
                report.telemetry.append({"slow_iter": it, **row})
            if backend == "ql":
                q_store[t.agent] = t.q_final
                lam_store[t.agent] = t.lam
        if not final_point:
            theta = theta_step(theta, grad, it, schedule)
    return report
