import numpy as np
import pytest

from dcc.cmdp import ConstraintVector, build_cmdp, theta_max_for
from dcc.coordinator import (
    EvaluationTriple,
    SlowSchedule,
    assemble_gradient,
    evaluate_triple,
    run_dcc,
    theta_step,
)
from dcc.env import ChainSpec, DeviceModel
from dcc.lp_oracle import CmdpLp
from dcc.solver_ql import TrainParams
from dcc.verification import exactness_check


def model_for(M=2, B=1, h=(1, 1), c=(2, 2), alpha=1.0, gamma=0.9):
    return DeviceModel(
        aoi_cap=M,
        battery_cap=B,
        harvest=ChainSpec(h[0], h[1]),
        cost=ChainSpec(c[0], c[1]),
        penalty_alpha=alpha,
        discount=gamma,
    )


def triple(agent, eps, base, local, coupling):
    return EvaluationTriple(
        agent=agent, epsilon=eps, base=base, local=local, coupling=coupling,
        j_hat=base, k_hat=0.0, lam=0.0, policy=np.zeros(1, dtype=np.int64),
    )


class TestAssembleGradient:
    def test_hand_example(self):
        triples = [triple(0, 0.1, 1.0, 0.9, 1.1), triple(1, 0.1, 2.0, 1.8, 2.3)]
        g = assemble_gradient(triples, 0.1)
        assert g.local == pytest.approx([-1.0, -2.0])
        assert g.coupling == pytest.approx([1.0, 3.0])
        assert g.gradient == pytest.approx([2.0, -1.0])

    def test_zero_coupling_reduces_to_local(self):
        triples = [triple(i, 0.05, 1.0, 0.8, 1.0) for i in range(3)]
        g = assemble_gradient(triples, 0.05)
        assert g.gradient == pytest.approx(g.local)

    def test_identity_holds_by_construction(self):
        rng = np.random.default_rng(3)
        triples = [
            triple(i, 0.1, float(rng.normal()), float(rng.normal()), float(rng.normal()))
            for i in range(5)
        ]
        g = assemble_gradient(triples, 0.1)
        for i in range(5):
            expected = g.local[i] + sum(g.coupling[j] for j in range(5) if j != i)
            assert g.gradient[i] == pytest.approx(expected)

    def test_mismatched_eps_rejected(self):
        triples = [triple(0, 0.1, 1.0, 0.9, 1.1), triple(1, 0.2, 2.0, 1.8, 2.3)]
        with pytest.raises(ValueError, match="eps"):
            assemble_gradient(triples, 0.1)


class TestThetaStep:
    def test_zero_gradient_fixed_point(self):
        tm = theta_max_for(0.9)
        theta = ConstraintVector(np.array([1.0, 2.0]), tm)
        g = assemble_gradient(
            [triple(0, 0.1, 1.0, 1.0, 1.0), triple(1, 0.1, 1.0, 1.0, 1.0)], 0.1
        )
        out = theta_step(theta, g, 0, SlowSchedule())
        assert np.allclose(out.theta, theta.theta)

    def test_descent_moves_into_interior(self):
        tm = theta_max_for(0.9)
        theta = ConstraintVector(np.zeros(2), tm)
        g = assemble_gradient(
            [triple(0, 0.1, 1.0, 0.5, 1.0), triple(1, 0.1, 1.0, 0.6, 1.0)], 0.1
        )
        out = theta_step(theta, g, 0, SlowSchedule(step0=0.25))
        assert np.all(out.theta > 0)
        assert np.all(out.theta <= tm)

    def test_projection_clamps_to_theta_max(self):
        tm = theta_max_for(0.9)
        theta = ConstraintVector(np.full(2, tm - 0.01), tm)
        g = assemble_gradient(
            [triple(0, 0.1, 1.0, 0.0, 1.0), triple(1, 0.1, 1.0, 0.0, 1.0)], 0.1
        )
        out = theta_step(theta, g, 0, SlowSchedule(step0=1.0))
        assert np.all(out.theta <= tm + 1e-12)


class TestSlowSchedule:
    def test_default_decaying_exponents_satisfy_series_conditions(self):
        sched = SlowSchedule(constant=False)
        assert sched.series_conditions_hold()
        # sum a_n diverges (exponent <= 1); sum (a_n/c_n)^2 converges
        assert sched.step_exponent <= 1.0
        assert 2 * (sched.step_exponent - sched.perturb_exponent) > 1.0

    def test_bad_exponents_detected(self):
        assert not SlowSchedule(constant=False, perturb_exponent=0.9).series_conditions_hold()

    def test_constant_mode(self):
        sched = SlowSchedule(constant=True)
        assert sched.step(0) == sched.step(10) == 0.25
        assert sched.sigma(0) == sched.sigma(10) == 0.05

    def test_decay(self):
        sched = SlowSchedule(constant=False)
        assert sched.step(9) == pytest.approx(0.025)
        assert sched.sigma(15) == pytest.approx(0.05 / 2.0)


class TestEvaluateTriple:
    def test_degenerate_eps_zero_gives_equal_values(self):
        model = model_for()
        tm = theta_max_for(model.discount)
        theta = ConstraintVector(np.array([2.0, 1.0]), tm)
        out = evaluate_triple(
            model, theta, 0, 0.0, backend="ql",
            params=TrainParams(budget=800, lambda_updates=4), seed=5,
        )
        assert out.base == out.local == out.coupling

    def test_lp_backend_matches_direct_solves(self):
        model = model_for()
        tm = theta_max_for(model.discount)
        theta = ConstraintVector(np.array([2.0, 1.5, 1.0]), tm)
        eps = 0.05
        out = evaluate_triple(model, theta, 1, eps, backend="lp")
        freq = theta.freq_sum_excluding(1)
        cmdp = build_cmdp(model, 1.5, freq)
        lp = CmdpLp(cmdp)
        assert out.base == pytest.approx(lp.solve(1.5).objective, abs=1e-9)
        assert out.local == pytest.approx(lp.solve(1.5 + eps).objective, abs=1e-9)
        assert out.coupling == pytest.approx(
            lp.solve(1.5, congestion_freq=freq + eps / tm).objective, abs=1e-9
        )

    def test_zero_budget_base_never_offloads(self):
        model = model_for()
        tm = theta_max_for(model.discount)
        theta = ConstraintVector(np.array([0.0, 1.0]), tm)
        out = evaluate_triple(
            model, theta, 0, 0.05, backend="ql",
            params=TrainParams(budget=2000, lambda_updates=4), seed=1,
        )
        assert out.k_hat == 0.0

    def test_lambda_shortcut_synthesizes_local_slope(self):
        model = model_for()
        tm = theta_max_for(model.discount)
        theta = ConstraintVector(np.array([2.0, 1.0]), tm)
        out = evaluate_triple(model, theta, 0, 1e-4, backend="lp", lambda_shortcut=True)
        g = assemble_gradient([out, evaluate_triple(model, theta, 1, 1e-4, backend="lp")], 1e-4)
        assert g.local[0] == pytest.approx(-out.lam, abs=1e-9)

    def test_eps_exceeding_headroom_rejected(self):
        model = model_for()
        tm = theta_max_for(model.discount)
        theta = ConstraintVector(np.array([tm]), tm)
        with pytest.raises(ValueError, match="theta_max"):
            evaluate_triple(model, theta, 0, 0.1, backend="lp")


class TestRunDcc:
    def test_single_agent_matches_grid_scan(self):
        # one agent: no coupling; the optimum over budgets is the best LP value
        model = model_for(M=3, B=2, h=(0, 1), c=(2, 3), gamma=0.8)
        tm = theta_max_for(model.discount)
        report = run_dcc(
            [model], seed=3, n_iterations=16, backend="lp",
            schedule=SlowSchedule(step0=1.0, perturb0=0.05),
            eval_rollouts=16,
        )
        cmdp = build_cmdp(model, 0.0, 0.0)
        lp = CmdpLp(cmdp)
        grid_best = min(lp.solve(t).objective for t in np.linspace(0.0, tm, 41))
        final = report.iterations[-1]["agent_j_tilde"][0]
        assert final <= grid_best * 1.02 + 1e-9

    def test_three_agent_linear_exactness_at_final_theta(self):
        models = [model_for(alpha=1.0) for _ in range(3)]
        report = run_dcc(
            models, seed=11, n_iterations=3, backend="lp", eval_rollouts=16,
        )
        tm = report.theta_max
        theta = ConstraintVector(np.array(report.iterations[-1]["theta"]), tm)
        out = exactness_check(models, theta)
        assert out["rel_err"] <= 1e-6

    def test_theta_iterates_stay_projected(self):
        models = [model_for() for _ in range(2)]
        report = run_dcc(models, seed=7, n_iterations=4, backend="lp", eval_rollouts=8)
        for rec in report.iterations:
            theta = np.array(rec["theta"])
            assert np.all(theta >= 0) and np.all(theta <= report.theta_max + 1e-12)

    def test_starts_at_zero_frequency_and_rises(self):
        models = [model_for() for _ in range(3)]
        report = run_dcc(models, seed=2, n_iterations=3, backend="lp", eval_rollouts=32)
        assert report.iterations[0]["offload_frequency"] == 0.0
        assert report.iterations[-1]["offload_frequency"] > 0.0

    def test_deterministic_and_scheduling_independent(self):
        models = [model_for() for _ in range(2)]
        kw = dict(
            seed=9, n_iterations=2, backend="ql",
            params=TrainParams(budget=1000, lambda_updates=4), eval_rollouts=8,
        )
        r1 = run_dcc(models, workers=1, **kw)
        r2 = run_dcc(models, workers=2, **kw)
        assert r1.to_json() == r2.to_json()
