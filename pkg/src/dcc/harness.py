"""Experiment harness: configuration, instance sampling, runners, persistence.

Output layout is `<out>/<experiment>/<seed>/results.csv` (plus auxiliary CSVs
and a report.json per run) and `<out>/<experiment>/summary.json` aggregating
across runs.  Every CSV row carries the seed and a hash of the resolved
configuration; identical inputs reproduce byte-identical files.  Independent
runs execute in a process pool capped by the DCC_THREADS environment
variable.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import IqlParams, train_iql
from .cmdp import ConstraintVector, build_cmdp, theta_max_for
from .coordinator import RunReport, SlowSchedule, run_dcc
from .env import ChainSpec, DeviceModel, check_crowd_incentive
from .lp_oracle import CmdpLp, solve_cmdp_lp, write_lp_text
from .solver_ql import TrainParams
from .verification import (
    bound_check,
    differentiability_check,
    exactness_check,
    gradient_check,
)

__all__ = [
    "HarnessConfig",
    "load_config",
    "config_hash",
    "normalize_rewards",
    "sample_instances",
    "sample_small_models",
    "run_experiment",
    "EXPERIMENTS",
]

REFERENCE_SETS = {"min_h": [0, 1], "max_h": [1, 2, 3], "min_c": [1], "max_c": [5, 7, 10]}


@dataclass
class HarnessConfig:
    """Resolved experiment configuration; defaults mirror the reference setup."""

    n_agents: int = 10
    alpha: float = 1.0
    gamma: float = 0.95
    aoi_cap: int = 15
    battery_cap: int = 15
    chain_kind: str = "walk"
    sample_sets: dict = field(default_factory=lambda: dict(REFERENCE_SETS))
    instance_preset: str = "reference"  # "reference", "small", or "explicit"
    # explicit single-environment description: {n_agents, M, B, alpha, gamma,
    # harvest: {min,max,kind}, cost: {min,max,kind}, seed}; all agents share it
    env: dict | None = None
    steps_per_evaluation: int = 100_000
    lambda_updates: int = 25
    slow_iterations: int = 5
    q_learning_rate: float = 0.5
    exploration: float = 0.05
    exploration_decay: float = 0.95
    lagrange_step0: float = 1.0
    iql_learning_rate: float = 0.05
    slow_step0: float = 0.25
    slow_sigma: float = 0.05
    slow_constant: bool = True
    rollouts: int = 32
    final_rollouts: int = 128
    joint_eval_rollouts: int = 64
    theta0: float = 0.0
    runs: int = 15
    scalability_sizes: list = field(default_factory=lambda: [10, 20, 50])
    backend: str = "ql"
    # tabular learners observe (aoi, battery); the harvest/cost chains stay
    # exogenous (the exact LP machinery always uses the full augmented state)
    observe_chains: bool = False
    slow_step_cap: float | None = 2.0
    exact_factored_eval: bool = True
    best_feasible_policy: bool = True
    verify_instances: int = 15
    bound_instances: int = 10
    bound_alphas: list = field(default_factory=lambda: [0.5, 2.0, 3.0])
    gradient_alphas: list = field(default_factory=lambda: [1.0, 2.0])
    eps: float = 1e-5
    lp_theta_i: float = 1.0
    lp_dump: bool = False

    def scaled_fast(self) -> "HarnessConfig":
        cfg = dataclasses.replace(self)
        cfg.steps_per_evaluation = max(cfg.lambda_updates, cfg.steps_per_evaluation // 10)
        cfg.runs = max(2, cfg.runs // 5)
        cfg.verify_instances = max(3, cfg.verify_instances // 5)
        cfg.bound_instances = max(2, cfg.bound_instances // 5)
        cfg.scalability_sizes = [n for n in cfg.scalability_sizes if n <= 20] or [10]
        return cfg

    def train_params(self) -> TrainParams:
        return TrainParams(
            budget=self.steps_per_evaluation,
            lambda_updates=self.lambda_updates,
            learning_rate=self.q_learning_rate,
            exploration=self.exploration,
            exploration_decay=self.exploration_decay,
            lagrange_step0=self.lagrange_step0,
            rollouts=self.rollouts,
            final_rollouts=self.final_rollouts,
            observe_chains=self.observe_chains,
            exact_factored_eval=self.exact_factored_eval,
            best_feasible_policy=self.best_feasible_policy,
        )

    def iql_params(self) -> IqlParams:
        return IqlParams(
            learning_rate=self.iql_learning_rate,
            exploration=self.exploration,
            exploration_decay=self.exploration_decay,
            eval_rollouts=self.joint_eval_rollouts,
            observe_chains=self.observe_chains,
        )

    def schedule(self) -> SlowSchedule:
        return SlowSchedule(
            step0=self.slow_step0, perturb0=self.slow_sigma,
            constant=self.slow_constant, step_cap=self.slow_step_cap,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> HarnessConfig:
    """Build a config from JSON plus overrides; unknown keys are errors."""
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            data.update(json.load(fh))
    data.update(overrides or {})
    fast = bool(data.pop("fast", False))
    valid = {f.name for f in dataclasses.fields(HarnessConfig)}
    unknown = set(data) - valid
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = HarnessConfig(**data)
    if cfg.instance_preset not in ("reference", "small", "explicit"):
        raise ValueError(f"unknown instance preset {cfg.instance_preset!r}")
    if cfg.env is not None:
        required = {"n_agents", "M", "B", "alpha", "gamma", "harvest", "cost", "seed"}
        missing = required - cfg.env.keys()
        if missing:
            raise ValueError(f"env config missing keys: {sorted(missing)}")
        cfg.instance_preset = "explicit"
        cfg.n_agents = int(cfg.env["n_agents"])
        cfg.alpha = float(cfg.env["alpha"])
        cfg.gamma = float(cfg.env["gamma"])
    elif cfg.instance_preset == "explicit":
        raise ValueError("instance_preset 'explicit' requires an 'env' block")
    return cfg.scaled_fast() if fast else cfg


def config_hash(cfg: HarnessConfig) -> str:
    payload = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def normalize_rewards(raw, baseline: float) -> np.ndarray:
    """Elementwise raw/baseline; the baseline defines 1.0."""
    if baseline == 0:
        raise ValueError("normalization baseline must be nonzero")
    return np.asarray(raw, dtype=float) / baseline


def sample_instances(sets: dict, n: int, seed: int, *, alpha=1.0, gamma=0.95,
                     aoi_cap=15, battery_cap=15, kind="walk") -> list[DeviceModel]:
    """Draw n device models from the sample sets, rejecting invalid draws.

    Rejects draws with max_H < min_H and instances failing the crowd-action
    incentive check.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5A)))
    models = []
    guard = 0
    while len(models) < n:
        guard += 1
        if guard > 1000 * n:
            raise RuntimeError("instance sampling failed to find valid draws")
        min_h = int(rng.choice(sets["min_h"]))
        max_h = int(rng.choice(sets["max_h"]))
        min_c = int(rng.choice(sets["min_c"]))
        max_c = int(rng.choice(sets["max_c"]))
        if max_h < min_h:
            continue
        model = DeviceModel(
            aoi_cap=aoi_cap,
            battery_cap=battery_cap,
            harvest=ChainSpec(min_h, max_h, kind),
            cost=ChainSpec(min_c, max_c, kind),
            penalty_alpha=alpha,
            discount=gamma,
        )
        if not check_crowd_incentive(model):
            continue
        models.append(model)
    return models


SMALL_SETS = {"min_h": [0, 1], "max_h": [1, 2], "min_c": [1, 2], "max_c": [2, 3]}


def sample_small_models(n: int, seed: int, *, alpha=1.0, gamma=0.95) -> list[DeviceModel]:
    """Reduced-size instances for the LP-based verification experiments."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5B)))
    models = []
    guard = 0
    while len(models) < n:
        guard += 1
        if guard > 1000 * n:
            raise RuntimeError("instance sampling failed to find valid draws")
        min_h = int(rng.choice(SMALL_SETS["min_h"]))
        max_h = int(rng.choice(SMALL_SETS["max_h"]))
        min_c = int(rng.choice(SMALL_SETS["min_c"]))
        max_c = int(rng.choice(SMALL_SETS["max_c"]))
        if max_h < min_h or max_c < min_c:
            continue
        model = DeviceModel(
            aoi_cap=int(rng.integers(3, 6)),
            battery_cap=int(rng.integers(2, 4)),
            harvest=ChainSpec(min_h, max_h),
            cost=ChainSpec(min_c, max_c),
            penalty_alpha=alpha,
            discount=gamma,
        )
        if not check_crowd_incentive(model):
            continue
        models.append(model)
    return models


def instance_for(cfg: HarnessConfig, n_agents: int, seed: int) -> list[DeviceModel]:
    if cfg.instance_preset == "explicit":
        from .env import model_from_env_config

        return [model_from_env_config(cfg.env)] * n_agents
    if cfg.instance_preset == "small":
        return sample_small_models(n_agents, seed, alpha=cfg.alpha, gamma=cfg.gamma)
    return sample_instances(
        cfg.sample_sets, n_agents, seed,
        alpha=cfg.alpha, gamma=cfg.gamma,
        aoi_cap=cfg.aoi_cap, battery_cap=cfg.battery_cap, kind=cfg.chain_kind,
    )


# ---------------------------------------------------------------------------
# CSV / JSON persistence


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    return str(value)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _mean_std(values) -> dict:
    vals = [float(v) for v in values]
    return {
        "mean": statistics.fmean(vals),
        "stdev": statistics.stdev(vals) if len(vals) > 1 else 0.0,
        "n": len(vals),
    }


def worker_count() -> int:
    env = os.environ.get("DCC_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _pool_map(fn, tasks):
    if len(tasks) <= 1 or worker_count() <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(worker_count(), len(tasks))) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# per-seed run primitives


def _dcc_steps_per_seed(cfg: HarnessConfig, n_agents: int) -> int:
    return cfg.slow_iterations * n_agents * 3 * cfg.steps_per_evaluation


def dcc_run(cfg: HarnessConfig, models, seed: int) -> RunReport:
    return run_dcc(
        models,
        seed=seed,
        n_iterations=cfg.slow_iterations,
        theta0=cfg.theta0,
        schedule=cfg.schedule(),
        params=cfg.train_params(),
        backend=cfg.backend,
        eval_rollouts=cfg.joint_eval_rollouts,
    )


def iql_run(cfg: HarnessConfig, models, seed: int, *, common: bool):
    total = _dcc_steps_per_seed(cfg, len(models)) // len(models)
    return train_iql(
        models,
        seed=seed,
        total_joint_steps=total,
        params=cfg.iql_params(),
        common_reward=common,
        eval_every=max(1, total // (cfg.slow_iterations + 1)),
    )


def _dcc_csv_rows(report: RunReport, seed: int, chash: str):
    results, agents = [], []
    for rec in report.iterations:
        results.append(
            [seed, chash, rec["iteration"], rec["joint_true_reward"],
             rec["joint_true_se"], rec["offload_frequency"]]
        )
        for i in range(report.n_agents):
            agents.append(
                [seed, chash, rec["iteration"], i, rec["theta"][i],
                 rec["agent_j"][i], rec["agent_k"][i], rec["agent_lambda"][i],
                 rec["epsilon"][i]]
            )
    return results, agents


def _write_dcc_outputs(report: RunReport, cfg, seed: int, run_dir: Path) -> None:
    chash = config_hash(cfg)
    results, agents = _dcc_csv_rows(report, seed, chash)
    write_csv(
        run_dir / "results.csv",
        ["seed", "config_hash", "iteration", "joint_true_reward", "joint_true_se",
         "offload_frequency"],
        results,
    )
    write_csv(
        run_dir / "agents.csv",
        ["seed", "config_hash", "iteration", "agent_id", "theta", "J", "K",
         "lambda", "epsilon"],
        agents,
    )
    write_csv(
        run_dir / "telemetry.csv",
        ["seed", "config_hash", "slow_iter", "agent_id", "outer_iter", "lambda",
         "J_hat", "K_hat", "epsilon"],
        [
            [seed, chash, row["slow_iter"], row["agent_id"], row["outer_iter"],
             row["lambda"], row["J_hat"], row["K_hat"], row["epsilon"]]
            for row in report.telemetry
        ],
    )
    write_json(run_dir / "report.json", report.to_json())


def _write_iql_outputs(report, cfg, seed: int, run_dir: Path) -> None:
    chash = config_hash(cfg)
    write_csv(
        run_dir / "results.csv",
        ["seed", "config_hash", "step", "joint_true_reward", "joint_true_se",
         "offload_frequency"],
        [
            [seed, chash, row["step"], row["joint_true_reward"],
             row["joint_true_se"], row["offload_frequency"]]
            for row in report.series
        ],
    )
    write_json(run_dir / "report.json", report.to_json())


# ---------------------------------------------------------------------------
# experiments


def _train_dcc_task(args):
    cfg, seed = args
    models = instance_for(cfg, cfg.n_agents, seed)
    return seed, dcc_run(cfg, models, seed)


def run_train_dcc(cfg: HarnessConfig, seed: int, out: Path, runs: int) -> dict:
    out_dir = out / "train-dcc"
    seeds = [seed + i for i in range(runs)]
    reports = _pool_map(_train_dcc_task, [(cfg, s) for s in seeds])
    final, freq = [], []
    for s, report in reports:
        _write_dcc_outputs(report, cfg, s, out_dir / str(s))
        final.append(report.final_joint)
        freq.append(report.iterations[-1]["offload_frequency"])
    summary = {
        "experiment": "train-dcc",
        "config_hash": config_hash(cfg),
        "seeds": seeds,
        "final_joint_reward": _mean_std(final),
        "final_offload_frequency": _mean_std(freq),
        "learning_steps_per_seed": _dcc_steps_per_seed(cfg, cfg.n_agents),
    }
    write_json(out_dir / "summary.json", summary)
    return summary


def _train_iql_task(args):
    cfg, seed, common = args
    models = instance_for(cfg, cfg.n_agents, seed)
    return seed, iql_run(cfg, models, seed, common=common)


def run_train_iql(cfg: HarnessConfig, seed: int, out: Path, runs: int, *, common=False) -> dict:
    name = "train-iql-common" if common else "train-iql"
    out_dir = out / name
    seeds = [seed + i for i in range(runs)]
    reports = _pool_map(_train_iql_task, [(cfg, s, common) for s in seeds])
    final, freq = [], []
    for s, report in reports:
        _write_iql_outputs(report, cfg, s, out_dir / str(s))
        final.append(report.final_joint)
        freq.append(report.final_offload_frequency)
    summary = {
        "experiment": name,
        "config_hash": config_hash(cfg),
        "seeds": seeds,
        "final_joint_reward": _mean_std(final),
        "final_offload_frequency": _mean_std(freq),
        "learning_steps_per_seed": _dcc_steps_per_seed(cfg, cfg.n_agents),
    }
    write_json(out_dir / "summary.json", summary)
    return summary


def _scalability_task(args):
    cfg, seed, n_agents = args
    models = instance_for(cfg, n_agents, seed)
    dcc = dcc_run(cfg, models, seed)
    iql = iql_run(cfg, models, seed, common=False)
    baseline = dcc.baseline_joint
    return {
        "seed": seed,
        "n_agents": n_agents,
        "baseline": baseline,
        "dcc_final": dcc.final_joint,
        "iql_final": iql.final_joint,
        "dcc_freq": dcc.iterations[-1]["offload_frequency"],
        "iql_freq": iql.final_offload_frequency,
        "dcc_norm": dcc.final_joint / baseline,
        "iql_norm": iql.final_joint / baseline,
    }


def run_scalability(cfg: HarnessConfig, seed: int, out: Path, runs: int) -> dict:
    """Normalized final rewards per (method, system size), instances shared
    per seed across methods and learning-step totals matched."""
    out_dir = out / "scalability"
    chash = config_hash(cfg)
    seeds = [seed + i for i in range(runs)]
    tasks = [(cfg, s, n) for n in cfg.scalability_sizes for s in seeds]
    rows = _pool_map(_scalability_task, tasks)
    by_seed: dict[int, list] = {}
    for row in rows:
        by_seed.setdefault(row["seed"], []).append(row)
    header = ["seed", "config_hash", "method", "n_agents", "final_reward",
              "normalized_final_reward", "baseline"]
    summary_cells: dict[str, dict] = {}
    for s in seeds:
        csv_rows = []
        for row in sorted(by_seed[s], key=lambda r: r["n_agents"]):
            for method, fin, norm in (
                ("dcc-ql", row["dcc_final"], row["dcc_norm"]),
                ("iql", row["iql_final"], row["iql_norm"]),
            ):
                csv_rows.append(
                    [s, chash, method, row["n_agents"], fin, norm, row["baseline"]]
                )
                summary_cells.setdefault(f"{method}@{row['n_agents']}", {}).setdefault(
                    "values", []
                ).append(norm)
        write_csv(out_dir / str(s) / "results.csv", header, csv_rows)
    summary = {
        "experiment": "scalability",
        "config_hash": chash,
        "seeds": seeds,
        "normalized_final_reward": {
            key: _mean_std(cell["values"]) for key, cell in sorted(summary_cells.items())
        },
        "learning_steps_per_seed": {
            str(n): _dcc_steps_per_seed(cfg, n) for n in cfg.scalability_sizes
        },
    }
    write_json(out_dir / "summary.json", summary)
    return summary


def _frequency_task(args):
    cfg, seed = args
    models = instance_for(cfg, cfg.n_agents, seed)
    dcc = dcc_run(cfg, models, seed)
    iql = iql_run(cfg, models, seed, common=False)
    steps_per_iter = cfg.n_agents * 3 * cfg.steps_per_evaluation
    dcc_curve = [
        (rec["iteration"] * steps_per_iter, rec["offload_frequency"], rec["joint_true_reward"])
        for rec in dcc.iterations
    ]
    iql_curve = [
        (row["step"] * cfg.n_agents, row["offload_frequency"], row["joint_true_reward"])
        for row in iql.series
    ]
    return seed, dcc_curve, iql_curve


def run_frequency(cfg: HarnessConfig, seed: int, out: Path, runs: int) -> dict:
    """Offload-frequency evolution for DCC and IQL on a shared step grid."""
    out_dir = out / "frequency"
    chash = config_hash(cfg)
    seeds = [seed + i for i in range(runs)]
    results = _pool_map(_frequency_task, [(cfg, s) for s in seeds])
    header = ["seed", "config_hash", "method", "step", "offload_frequency",
              "joint_true_reward"]
    dcc_final, iql_final = [], []
    for s, dcc_curve, iql_curve in results:
        rows = [[s, chash, "dcc-ql", st, f, j] for st, f, j in dcc_curve]
        rows += [[s, chash, "iql", st, f, j] for st, f, j in iql_curve]
        write_csv(out_dir / str(s) / "results.csv", header, rows)
        dcc_final.append(dcc_curve[-1][1])
        iql_final.append(iql_curve[-1][1])
    summary = {
        "experiment": "frequency",
        "config_hash": chash,
        "seeds": seeds,
        "dcc_final_frequency": _mean_std(dcc_final),
        "iql_final_frequency": _mean_std(iql_final),
    }
    write_json(out_dir / "summary.json", summary)
    return summary


def _tiny_model(rng, gamma: float) -> DeviceModel:
    """Very small instances whose 3-agent product chain stays solvable."""
    while True:
        h = (1, 1) if rng.random() < 0.5 else (0, 1)
        c = (2, 2) if rng.random() < 0.5 else (3, 3)
        model = DeviceModel(
            aoi_cap=2, battery_cap=1,
            harvest=ChainSpec(*h), cost=ChainSpec(*c),
            penalty_alpha=1.0, discount=gamma,
        )
        if build_cmdp(model, 1.0, 0.0).n_states <= 12:
            return model


def _binding_theta(model, rng) -> tuple[float, float] | None:
    """Sample a (theta_i, freq_minus) pair at which the budget binds."""
    theta_max = theta_max_for(model.discount)
    for _ in range(12):
        freq_minus = float(rng.uniform(0.2, 1.5))
        cmdp = build_cmdp(model, theta_max, freq_minus)
        free = CmdpLp(cmdp).solve(theta_max)
        if free.cost_value < 0.05 * theta_max:
            continue  # offloading unattractive here; resample
        theta_i = float(rng.uniform(0.2, 0.8) * free.cost_value)
        row = gradient_check(model, theta_i, freq_minus)
        if row["binding"]:
            return theta_i, freq_minus
    return None


def run_verify_gradient(cfg: HarnessConfig, seed: int, out: Path, runs: int) -> dict:
    """Finite-difference gradient components vs their closed forms (LP exact)."""
    out_dir = out / "verify-gradient"
    chash = config_hash(cfg)
    rows = []
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x6A)))
    for alpha in cfg.gradient_alphas:
        models = sample_small_models(cfg.verify_instances, seed, alpha=alpha, gamma=cfg.gamma)
        for idx, model in enumerate(models):
            pair = _binding_theta(model, rng)
            if pair is None:
                continue
            theta_i, freq_minus = pair
            row = gradient_check(model, theta_i, freq_minus, eps=cfg.eps)
            rows.append(
                [seed, chash, alpha, idx, row["theta_i"], row["freq_minus"],
                 row["local_fd"], row["local_fd_left"], row["neg_lambda_scaled"],
                 row["coupling_fd"], row["coupling_analytic"], row["binding"]]
            )
    write_csv(
        out_dir / str(seed) / "results.csv",
        ["seed", "config_hash", "alpha", "instance", "theta_i", "freq_minus",
         "local_fd", "local_fd_left", "neg_lambda_scaled", "coupling_fd",
         "coupling_analytic", "binding"],
        rows,
    )
    diff_points = _verify_diff_points(cfg, seed)
    write_csv(
        out_dir / str(seed) / "differentiability.csv",
        ["seed", "config_hash", "theta_i", "left", "right", "rel_gap"],
        [[seed, chash, p["theta_i"], p["left"], p["right"], p["rel_gap"]] for p in diff_points],
    )
    local_errs = [abs(r[6] - r[8]) / max(abs(r[8]), 1e-12) for r in rows]
    coup_errs = [abs(r[9] - r[10]) / max(abs(r[10]), 1e-12) for r in rows]
    agree = [p["rel_gap"] <= 1e-6 for p in diff_points]
    summary = {
        "experiment": "verify-gradient",
        "config_hash": chash,
        "seed": seed,
        "n_cases": len(rows),
        "max_local_rel_err": max(local_errs) if local_errs else None,
        "max_coupling_rel_err": max(coup_errs) if coup_errs else None,
        "all_local_nonpositive": bool(all(r[6] <= 1e-8 for r in rows)),
        "all_coupling_nonnegative": bool(all(r[9] >= -1e-8 for r in rows)),
        "one_sided_agreement_fraction": (
            sum(agree) / len(agree) if agree else None
        ),
    }
    write_json(out_dir / "summary.json", summary)
    return summary


def run_verify_bound(cfg: HarnessConfig, seed: int, out: Path, runs: int) -> dict:
    """Decomposition error against the chord bound; exactness rows at alpha=1."""
    out_dir = out / "verify-bound"
    chash = config_hash(cfg)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7B)))
    rows = []
    exact_rows = []
    theta_max = theta_max_for(cfg.gamma)
    # exact rows: tiny 3-agent instances, linear penalty, joint chain solved exactly
    for idx in range(cfg.bound_instances):
        models = [_tiny_model(rng, cfg.gamma) for _ in range(3)]
        theta = ConstraintVector(rng.uniform(0.1, 0.6, size=3) * theta_max, theta_max)
        out_row = exactness_check(models, theta)
        exact_rows.append(
            [seed, chash, 1.0, idx, out_row["j_true"], out_row["sum_j_tilde"],
             out_row["rel_err"]]
        )
    for alpha in cfg.bound_alphas:
        for idx in range(cfg.bound_instances):
            models = sample_small_models(10, seed + 31 * idx, alpha=alpha, gamma=cfg.gamma)
            theta = ConstraintVector(
                rng.uniform(0.03, 0.25, size=10) * theta_max, theta_max
            )
            out_row = bound_check(models, theta, n_rollouts=cfg.final_rollouts, seed=seed + idx)
            rows.append(
                [seed, chash, alpha, idx, out_row["j_true_mc"], out_row["j_true_se"],
                 out_row["sum_j_tilde"], out_row["abs_err"], out_row["bound"],
                 out_row["within"]]
            )
    write_csv(
        out_dir / str(seed) / "results.csv",
        ["seed", "config_hash", "alpha", "instance", "j_true_mc", "j_true_se",
         "sum_j_tilde", "abs_err", "bound", "within"],
        rows,
    )
    write_csv(
        out_dir / str(seed) / "exactness.csv",
        ["seed", "config_hash", "alpha", "instance", "j_true", "sum_j_tilde", "rel_err"],
        exact_rows,
    )
    summary = {
        "experiment": "verify-bound",
        "config_hash": chash,
        "seed": seed,
        "n_bound_cases": len(rows),
        "within_fraction": (
            sum(1 for r in rows if r[-1]) / len(rows) if rows else None
        ),
        "n_exact_cases": len(exact_rows),
        "max_exact_rel_err": max((r[-1] for r in exact_rows), default=None),
    }
    write_json(out_dir / "summary.json", summary)
    return summary


def run_lp_solve(cfg: HarnessConfig, seed: int, out: Path, runs: int) -> dict:
    """Solve one sampled CMDP exactly and persist the occupancy summary."""
    out_dir = out / "lp-solve"
    model = (
        sample_small_models(1, seed, alpha=cfg.alpha, gamma=cfg.gamma)[0]
        if cfg.instance_preset == "small"
        else instance_for(cfg, 1, seed)[0]
    )
    theta_i = cfg.lp_theta_i
    cmdp = build_cmdp(model, theta_i, 0.0)
    occ = solve_cmdp_lp(cmdp)
    if cfg.lp_dump:
        (out_dir / str(seed)).mkdir(parents=True, exist_ok=True)
        write_lp_text(cmdp, theta_i, out_dir / str(seed) / "program.lp")
    summary = {
        "experiment": "lp-solve",
        "config_hash": config_hash(cfg),
        "seed": seed,
        "model": model.to_dict(),
        "theta_i": theta_i,
        "objective": occ.objective,
        "lambda_star": occ.lambda_star,
        "discounted_cost": occ.cost_value,
        "mass": occ.mass,
        "n_states": cmdp.n_states,
    }
    write_json(out_dir / str(seed) / "summary.json", summary)
    write_json(out_dir / "summary.json", summary)
    return summary


def _verify_diff_points(cfg: HarnessConfig, seed: int) -> list[dict]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x8C)))
    points = []
    models = sample_small_models(cfg.verify_instances, seed, alpha=2.0, gamma=cfg.gamma)
    theta_max = theta_max_for(cfg.gamma)
    for model in models:
        for _ in range(2):
            theta_i = float(rng.uniform(0.05, 0.7) * theta_max)
            freq = float(rng.uniform(0.0, 1.5))
            points.append(differentiability_check(model, theta_i, freq, eps=cfg.eps))
    return points


EXPERIMENTS = {
    "train-dcc": run_train_dcc,
    "train-iql": lambda cfg, seed, out, runs: run_train_iql(cfg, seed, out, runs),
    "train-iql-common": lambda cfg, seed, out, runs: run_train_iql(
        cfg, seed, out, runs, common=True
    ),
    "lp-solve": run_lp_solve,
    "verify-gradient": run_verify_gradient,
    "verify-bound": run_verify_bound,
    "scalability": run_scalability,
    "frequency": run_frequency,
}


def run_experiment(name: str, cfg: HarnessConfig, seed: int, out_dir: str | Path, runs: int | None = None) -> dict:
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return EXPERIMENTS[name](cfg, seed, out, runs if runs is not None else cfg.runs)
