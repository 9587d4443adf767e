import json

import pytest
from fastapi.testclient import TestClient

from dcc.cli import build_parser, main
from dcc.service.app import app

client = TestClient(app)

TINY = {
    "n_agents": 2,
    "instance_preset": "small",
    "steps_per_evaluation": 600,
    "lambda_updates": 3,
    "slow_iterations": 1,
    "rollouts": 4,
    "final_rollouts": 8,
    "joint_eval_rollouts": 4,
    "observe_chains": True,
}


class TestEndpoints:
    def test_health(self):
        res = client.get("/health")
        assert res.status_code == 200
        body = res.json()
        assert body["status"] == "ok"
        assert "train-dcc" in body["experiments"]

    def test_default_config(self):
        res = client.get("/v1/config/default")
        assert res.status_code == 200
        assert res.json()["gamma"] == 0.95

    def test_unknown_experiment_rejected(self):
        res = client.post(
            "/v1/experiments",
            json={"experiment": "nope", "seed": 0, "out_dir": "/tmp/x"},
        )
        assert res.status_code == 400

    def test_bad_config_rejected(self):
        res = client.post(
            "/v1/experiments",
            json={"experiment": "train-dcc", "config": {"bogus": 1}, "seed": 0,
                  "out_dir": "/tmp/x"},
        )
        assert res.status_code == 400
        assert "bogus" in res.json()["detail"]

    def test_validation_error_is_422(self):
        res = client.post("/v1/experiments", json={"seed": "zero"})
        assert res.status_code == 422

    def test_run_experiment_writes_files(self, tmp_path):
        res = client.post(
            "/v1/experiments",
            json={
                "experiment": "train-iql",
                "config": TINY,
                "seed": 1,
                "runs": 1,
                "out_dir": str(tmp_path),
            },
        )
        assert res.status_code == 200
        body = res.json()
        assert body["summary"]["experiment"] == "train-iql"
        assert (tmp_path / "train-iql" / "1" / "results.csv").exists()

    def test_lp_solve_matches_direct_call(self):
        from dcc.cmdp import build_cmdp
        from dcc.env import ChainSpec, DeviceModel
        from dcc.lp_oracle import solve_cmdp_lp

        model = DeviceModel(
            aoi_cap=3, battery_cap=2, harvest=ChainSpec(0, 1), cost=ChainSpec(1, 2),
            penalty_alpha=1.0, discount=0.9,
        )
        res = client.post(
            "/v1/lp/solve",
            json={"device": model.to_dict(), "theta_i": 1.2, "theta_minus_freq": 0.4},
        )
        assert res.status_code == 200
        body = res.json()
        occ = solve_cmdp_lp(build_cmdp(model, 1.2, 0.4))
        assert body["objective"] == pytest.approx(occ.objective, abs=1e-9)
        assert body["lambda_star"] == pytest.approx(occ.lambda_star, abs=1e-9)

    def test_lp_solve_bad_model_rejected(self):
        res = client.post(
            "/v1/lp/solve",
            json={"device": {"M": 1}, "theta_i": 1.0},
        )
        assert res.status_code == 400


class TestCli:
    def test_unknown_subcommand_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["frobnicate"])
        assert exc.value.code != 0

    def test_unknown_flag_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["train-dcc", "--bogus"])
        assert exc.value.code != 0

    def test_experiment_through_inprocess_service(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(TINY))
        code = main(
            [
                "train-iql",
                "--config", str(cfg_path),
                "--seed", "2",
                "--out", str(tmp_path / "out"),
                "--runs", "1",
            ]
        )
        assert code == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["experiment"] == "train-iql"
        assert (tmp_path / "out" / "train-iql" / "2" / "results.csv").exists()

    def test_cli_surfaces_server_error(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"bogus_key": True}))
        code = main(
            ["train-iql", "--config", str(cfg_path), "--out", str(tmp_path / "o")]
        )
        assert code == 1
        assert "bogus_key" in capsys.readouterr().err
