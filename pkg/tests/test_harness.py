import json

import numpy as np
import pytest

from dcc.harness import (
    HarnessConfig,
    config_hash,
    load_config,
    normalize_rewards,
    run_experiment,
    sample_instances,
    sample_small_models,
)

FAST = {
    "n_agents": 2,
    "instance_preset": "small",
    "steps_per_evaluation": 1500,
    "lambda_updates": 5,
    "slow_iterations": 2,
    "rollouts": 8,
    "final_rollouts": 16,
    "joint_eval_rollouts": 8,
    "runs": 2,
    "verify_instances": 2,
    "bound_instances": 1,
    "bound_alphas": [2.0],
    "observe_chains": True,
}


class TestConfig:
    def test_defaults_mirror_reference_setup(self):
        cfg = HarnessConfig()
        assert cfg.aoi_cap == 15 and cfg.battery_cap == 15
        assert cfg.gamma == 0.95
        assert cfg.q_learning_rate == 0.5 and cfg.iql_learning_rate == 0.05
        assert cfg.exploration == 0.05 and cfg.exploration_decay == 0.95
        assert cfg.lagrange_step0 == 1.0
        assert cfg.slow_step0 == 0.25 and cfg.slow_sigma == 0.05
        assert cfg.steps_per_evaluation == 100_000 and cfg.slow_iterations == 5
        assert cfg.runs == 15
        assert cfg.sample_sets == {
            "min_h": [0, 1], "max_h": [1, 2, 3], "min_c": [1], "max_c": [5, 7, 10],
        }

    def test_load_from_file_with_overrides(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"n_agents": 4, "alpha": 2.0}))
        cfg = load_config(path, {"seed": None} if False else {"runs": 3})
        assert cfg.n_agents == 4 and cfg.alpha == 2.0 and cfg.runs == 3

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"not_a_key": 1}))
        with pytest.raises(ValueError, match="unknown config keys"):
            load_config(path)

    def test_fast_flag_scales_budgets(self):
        cfg = load_config(None, {"fast": True})
        assert cfg.steps_per_evaluation == 10_000
        assert cfg.runs == 3

    def test_hash_stable_and_sensitive(self):
        a = HarnessConfig()
        b = HarnessConfig()
        c = HarnessConfig(alpha=2.0)
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)


class TestNormalizeRewards:
    def test_first_element_baseline(self):
        out = normalize_rewards([2.0, 4.0, 1.0], 2.0)
        assert out[0] == 1.0

    def test_all_equal(self):
        assert np.allclose(normalize_rewards([3.0, 3.0], 3.0), 1.0)

    def test_double(self):
        assert normalize_rewards([4.0], 2.0)[0] == 2.0

    def test_zero_baseline_rejected(self):
        with pytest.raises(ValueError):
            normalize_rewards([1.0], 0.0)


class TestSampleInstances:
    SETS = {"min_h": [0, 1], "max_h": [1, 2, 3], "min_c": [1], "max_c": [5, 7, 10]}

    def test_reproducible(self):
        a = sample_instances(self.SETS, 5, 42)
        b = sample_instances(self.SETS, 5, 42)
        assert a == b

    def test_min_cost_always_one(self):
        models = sample_instances(self.SETS, 10, 7)
        assert all(m.cost.lo == 1 for m in models)
        assert all(m.aoi_cap == 15 and m.battery_cap == 15 for m in models)
        assert all(m.discount == 0.95 for m in models)

    def test_rejection_terminates_because_grid_is_valid(self):
        # oracle: exhaustively check the full sample grid passes the
        # incentive filter, so rejection sampling terminates
        from dcc.env import ChainSpec, DeviceModel, check_crowd_incentive

        valid = 0
        for min_h in self.SETS["min_h"]:
            for max_h in self.SETS["max_h"]:
                for max_c in self.SETS["max_c"]:
                    if max_h < min_h:
                        continue
                    model = DeviceModel(
                        aoi_cap=15, battery_cap=15,
                        harvest=ChainSpec(min_h, max_h),
                        cost=ChainSpec(1, max_c),
                        penalty_alpha=1.0, discount=0.95,
                    )
                    valid += check_crowd_incentive(model)
        assert valid > 0
        sample_instances(self.SETS, 3, 0)

    def test_small_models_bounded(self):
        models = sample_small_models(5, 3)
        for m in models:
            assert m.aoi_cap <= 5 and m.battery_cap <= 3


class TestExperimentOutputs:
    def test_unknown_experiment(self, tmp_path):
        with pytest.raises(ValueError, match="unknown experiment"):
            run_experiment("nope", HarnessConfig(), 0, tmp_path)

    def test_train_dcc_layout_and_determinism(self, tmp_path):
        cfg = load_config(None, dict(FAST))
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        s1 = run_experiment("train-dcc", cfg, 5, out1, runs=2)
        s2 = run_experiment("train-dcc", cfg, 5, out2, runs=2)
        assert s1 == s2
        for seed in (5, 6):
            f1 = out1 / "train-dcc" / str(seed) / "results.csv"
            f2 = out2 / "train-dcc" / str(seed) / "results.csv"
            assert f1.read_bytes() == f2.read_bytes()
            for name in ("agents.csv", "telemetry.csv", "report.json"):
                assert (out1 / "train-dcc" / str(seed) / name).exists()
        assert (out1 / "train-dcc" / "summary.json").read_bytes() == (
            out2 / "train-dcc" / "summary.json"
        ).read_bytes()

    def test_csv_rows_carry_seed_and_hash(self, tmp_path):
        cfg = load_config(None, dict(FAST))
        run_experiment("train-iql", cfg, 3, tmp_path, runs=1)
        lines = (tmp_path / "train-iql" / "3" / "results.csv").read_text().splitlines()
        header = lines[0].split(",")
        assert header[:2] == ["seed", "config_hash"]
        chash = config_hash(cfg)
        for line in lines[1:]:
            cells = line.split(",")
            assert cells[0] == "3" and cells[1] == chash

    def test_scalability_matches_steps_and_writes_summary(self, tmp_path):
        cfg = load_config(None, {**FAST, "scalability_sizes": [2], "n_agents": 2})
        summary = run_experiment("scalability", cfg, 1, tmp_path, runs=2)
        assert "dcc-ql@2" in summary["normalized_final_reward"]
        assert "iql@2" in summary["normalized_final_reward"]
        # learning-step totals are matched across methods by construction
        steps = summary["learning_steps_per_seed"]["2"]
        assert steps == cfg.slow_iterations * 2 * 3 * cfg.steps_per_evaluation
        assert (tmp_path / "scalability" / "1" / "results.csv").exists()

    def test_frequency_curves(self, tmp_path):
        cfg = load_config(None, dict(FAST))
        summary = run_experiment("frequency", cfg, 2, tmp_path, runs=1)
        rows = (tmp_path / "frequency" / "2" / "results.csv").read_text().splitlines()
        methods = {line.split(",")[2] for line in rows[1:]}
        assert methods == {"dcc-ql", "iql"}
        assert summary["dcc_final_frequency"]["n"] == 1

    def test_verify_gradient_outputs(self, tmp_path):
        cfg = load_config(
            None, {**FAST, "gradient_alphas": [2.0], "verify_instances": 3}
        )
        summary = run_experiment("verify-gradient", cfg, 4, tmp_path, runs=1)
        assert summary["n_cases"] > 0
        assert summary["all_local_nonpositive"]
        assert summary["all_coupling_nonnegative"]
        assert summary["max_local_rel_err"] < 1e-3
        assert summary["max_coupling_rel_err"] < 1e-3
        assert (tmp_path / "verify-gradient" / "4" / "results.csv").exists()
        assert (tmp_path / "verify-gradient" / "4" / "differentiability.csv").exists()

    def test_verify_bound_outputs(self, tmp_path):
        cfg = load_config(None, {**FAST, "bound_instances": 2})
        summary = run_experiment("verify-bound", cfg, 6, tmp_path, runs=1)
        assert summary["n_exact_cases"] == 2
        assert summary["max_exact_rel_err"] <= 1e-6
        assert summary["within_fraction"] == 1.0

    def test_lp_solve_output(self, tmp_path):
        cfg = load_config(None, {**FAST, "lp_dump": True, "lp_theta_i": 0.8})
        summary = run_experiment("lp-solve", cfg, 9, tmp_path, runs=1)
        assert summary["theta_i"] == 0.8
        assert summary["objective"] > 0
        assert (tmp_path / "lp-solve" / "9" / "program.lp").exists()


class TestExplicitEnvConfig:
    ENV = {
        "n_agents": 2, "M": 3, "B": 2, "alpha": 1.0, "gamma": 0.9,
        "harvest": {"min": 0, "max": 1, "kind": "walk"},
        "cost": {"min": 1, "max": 2, "kind": "iid"},
        "seed": 5,
    }

    def test_explicit_env_builds_identical_agents(self):
        from dcc.harness import instance_for

        cfg = load_config(None, {"env": dict(self.ENV)})
        assert cfg.instance_preset == "explicit"
        assert cfg.n_agents == 2 and cfg.gamma == 0.9
        models = instance_for(cfg, cfg.n_agents, 0)
        assert len(models) == 2 and models[0] == models[1]
        assert models[0].aoi_cap == 3 and models[0].cost.kind == "iid"

    def test_env_schema_validated(self):
        bad = dict(self.ENV)
        del bad["harvest"]
        with pytest.raises(ValueError, match="env config missing"):
            load_config(None, {"env": bad})

    def test_env_file_round_trip(self, tmp_path):
        from dcc.env import load_env_config, save_env_config

        path = tmp_path / "env.json"
        save_env_config(self.ENV, path)
        loaded = load_env_config(path)
        assert loaded == self.ENV
