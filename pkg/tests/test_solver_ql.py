import numpy as np
import pytest

from dcc.cmdp import build_cmdp, discounted_value, theta_max_for
from dcc.env import Action, ChainSpec, DeviceModel
from dcc.lp_oracle import solve_cmdp_lp
from dcc.solver_ql import (
    LagrangeState,
    QTable,
    TrainParams,
    lambda_update,
    q_update,
    shaped_reward,
    train_constrained,
)

from helpers import value_iteration


def small_model(M=3, B=2, h=(0, 1), c=(1, 2), alpha=1.0, gamma=0.9, kind="walk"):
    return DeviceModel(
        aoi_cap=M,
        battery_cap=B,
        harvest=ChainSpec(h[0], h[1], kind),
        cost=ChainSpec(c[0], c[1], kind),
        penalty_alpha=alpha,
        discount=gamma,
    )


class TestShapedReward:
    def test_active_cost(self):
        assert shaped_reward(2.6, 1.0, 0.5) == pytest.approx(3.1)

    def test_inactive_cost(self):
        assert shaped_reward(2.0, 0.0, 7.0) == 2.0

    def test_unconstrained_limit(self):
        assert shaped_reward(4.2, 1.0, 0.0) == 4.2

    def test_negative_multiplier_rejected(self):
        with pytest.raises(ValueError):
            shaped_reward(1.0, 1.0, -0.1)


class TestQUpdate:
    def test_full_learning_rate_overwrites(self):
        qt = QTable(q=np.zeros((2, 3)), learning_rate=1.0)
        adm = np.array([True, False, False])
        # terminal-like: next state value 0
        q_update(qt, 0, 0, 5.0, 1, gamma=0.9, admissible_next=adm)
        assert qt.q[0, 0] == pytest.approx(5.0)

    def test_myopic_limit(self):
        rng = np.random.default_rng(0)
        qt = QTable(q=np.zeros((1, 3)), learning_rate=0.1)
        adm = np.array([True, True, True])
        for _ in range(4000):
            r = 2.0 + rng.normal(scale=0.1)
            q_update(qt, 0, 1, r, 0, gamma=0.0, admissible_next=adm)
        assert qt.q[0, 1] == pytest.approx(2.0, abs=0.05)

    def test_matches_value_iteration_on_sweeps(self):
        model = small_model(M=2, B=1, h=(1, 1), c=(1, 1))
        cmdp = build_cmdp(model, 1.0, 0.4, beta_state=(2, 0, 1, 1))
        v_star, _, q_star = value_iteration(cmdp)
        qt = QTable(q=np.zeros((cmdp.n_states, 3)), learning_rate=0.9)
        # deterministic chains: exhaustive (s, a) sweeps are exact backups
        for _ in range(600):
            for s in range(cmdp.n_states):
                for a in range(3):
                    if cmdp.admissible[s, a]:
                        idxs, probs = cmdp.kernel_row(s, a)
                        s2 = int(idxs[np.argmax(probs)])
                        q_update(
                            qt, s, a, float(cmdp.reward[s, a]), s2,
                            gamma=cmdp.gamma, admissible_next=cmdp.admissible[s2],
                        )
        adm_q = np.where(cmdp.admissible, q_star, np.inf)
        assert np.allclose(
            np.where(cmdp.admissible, qt.q, np.inf), adm_q, atol=1e-6
        )

    def test_rejects_nan_table(self):
        with pytest.raises(ValueError):
            QTable(q=np.array([[np.nan, 0.0, 0.0]]))


class TestLambdaUpdate:
    def test_ascent_step(self):
        ls = LagrangeState(lam=0.5, eta0=1.0)
        assert lambda_update(ls, 0.3, 0.2, 0).lam == pytest.approx(0.6)

    def test_projection_to_nonnegative(self):
        ls = LagrangeState(lam=0.1, eta0=1.0)
        assert lambda_update(ls, 0.0, 0.5, 0).lam == 0.0

    def test_fixed_point(self):
        ls = LagrangeState(lam=0.7, eta0=1.0)
        assert lambda_update(ls, 0.4, 0.4, 3).lam == pytest.approx(0.7)

    def test_step_sequence_decays(self):
        ls = LagrangeState(eta0=1.0)
        etas = [ls.eta(k) for k in range(50)]
        assert all(e1 >= e2 for e1, e2 in zip(etas, etas[1:]))
        assert etas[-1] < 0.05


def fast_params(budget=40_000, **kw):
    defaults = dict(budget=budget, lambda_updates=20, rollouts=32, final_rollouts=96)
    defaults.update(kw)
    return TrainParams(**defaults)


class TestTrainConstrained:
    def test_zero_budget_masks_offload(self):
        model = small_model()
        res = train_constrained(
            model, 0.0, 0.3,
            params=fast_params(budget=4000, lambda_updates=4),
            rng=np.random.default_rng(0),
        )
        assert res.k_hat == 0.0
        assert not np.any(res.greedy == Action.OFFLOAD)

    def test_nonbinding_budget_matches_unconstrained_oracle(self):
        model = small_model(M=2, B=1, h=(1, 1), c=(2, 2))
        theta_max = theta_max_for(model.discount)
        res = train_constrained(
            model, theta_max, 0.0,
            params=fast_params(),
            rng=np.random.default_rng(1),
        )
        assert res.lam == pytest.approx(0.0, abs=1e-9)
        cmdp = build_cmdp(model, theta_max, 0.0)
        v, _, _ = value_iteration(cmdp)
        assert res.j_hat == pytest.approx(float(cmdp.beta @ v), rel=0.02)

    def test_binding_budget_tracks_lp(self):
        model = small_model(M=3, B=2, h=(0, 1), c=(2, 3))
        theta_max = theta_max_for(model.discount)
        theta = 0.3 * theta_max
        cmdp = build_cmdp(model, theta, 0.5)
        occ = solve_cmdp_lp(cmdp)
        assert occ.lambda_star > 1e-6  # the budget binds here
        res = train_constrained(
            model, theta, 0.5,
            params=fast_params(budget=60_000, lambda_updates=25),
            rng=np.random.default_rng(2),
        )
        assert res.exact_eval
        assert abs(res.j_hat - occ.objective) <= 0.02 * abs(occ.objective)
        assert abs(res.k_hat - theta) <= 0.05 * theta_max

    def test_budget_too_small(self):
        with pytest.raises(ValueError):
            train_constrained(
                small_model(), 1.0, 0.0,
                params=TrainParams(budget=10, lambda_updates=25),
                rng=np.random.default_rng(0),
            )

    def test_deterministic_given_seed(self):
        model = small_model()
        results = [
            train_constrained(
                model, 1.0, 0.4,
                params=fast_params(budget=2000, lambda_updates=4),
                rng=np.random.default_rng(123),
            )
            for _ in range(2)
        ]
        assert np.array_equal(results[0].qtable.q, results[1].qtable.q)
        assert results[0].j_tilde == results[1].j_tilde
        assert results[0].telemetry == results[1].telemetry

    def test_monotone_shaping(self):
        # with the CMDP solved exactly at each multiplier, a larger multiplier
        # never increases the greedy policy's discounted cost
        model = small_model(M=2, B=1, h=(1, 1), c=(2, 2))
        cmdp = build_cmdp(model, 1.0, 0.2)
        costs = []
        for lam in np.linspace(0.0, 8.0, 17):
            shaped = cmdp.reward + lam * cmdp.cost
            _, greedy, _ = value_iteration(cmdp, reward=shaped)
            _, k = discounted_value(cmdp, greedy)
            costs.append(k)
        assert all(k1 >= k2 - 1e-9 for k1, k2 in zip(costs, costs[1:]))

    def test_telemetry_schema(self):
        model = small_model()
        res = train_constrained(
            model, 1.0, 0.0,
            params=fast_params(budget=2000, lambda_updates=4),
            rng=np.random.default_rng(5),
            agent_id=7,
        )
        assert len(res.telemetry) == 4
        row = res.telemetry[0]
        assert set(row) == {"agent_id", "outer_iter", "lambda", "J_hat", "K_hat", "epsilon"}
        assert row["agent_id"] == 7
        eps = [r["epsilon"] for r in res.telemetry]
        assert all(e1 > e2 for e1, e2 in zip(eps, eps[1:]))
