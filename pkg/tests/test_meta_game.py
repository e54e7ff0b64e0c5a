import numpy as np
import pytest

from gradrl.adversaries import make_opponent
from gradrl.envs import make_matrix_game_env
from gradrl.meta_game import (
    MatrixError,
    MetaStrategy,
    PayoffMatrix,
    double_oracle_matrix,
    estimate_payoff_entry,
    exact_exploitability,
    solve_zero_sum,
)
from gradrl.policy import ArchSpec, Policy, make_pure_discrete_policy

RPS = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]])


class TestMetaStrategy:
    def test_validates_simplex(self):
        with pytest.raises(MatrixError):
            MetaStrategy(np.array([0.5, 0.6]))
        with pytest.raises(MatrixError):
            MetaStrategy(np.array([-0.1, 1.1]))

    def test_support(self):
        m = MetaStrategy(np.array([0.5, 0.0, 0.5]))
        assert m.support.tolist() == [0, 2]


class TestSolveZeroSum:
    def test_pure_saddle(self):
        sol = solve_zero_sum(np.array([[0.0, -1.0], [1.0, 0.0]]))
        assert np.allclose(sol.sigma_row.probs, [0.0, 1.0], atol=1e-8)
        assert np.allclose(sol.sigma_col.probs, [0.0, 1.0], atol=1e-8)
        assert abs(sol.value) < 1e-9

    def test_rps_uniform(self):
        sol = solve_zero_sum(RPS)
        assert np.allclose(sol.sigma_row.probs, 1.0 / 3.0, atol=1e-8)
        assert np.allclose(sol.sigma_col.probs, 1.0 / 3.0, atol=1e-8)
        assert abs(sol.value) < 1e-9

    def test_degenerate_1x1(self):
        sol = solve_zero_sum(np.array([[0.7]]))
        assert sol.value == pytest.approx(0.7, abs=1e-9)
        assert sol.sigma_row.probs.tolist() == [1.0]

    def test_rejects_nan(self):
        with pytest.raises(MatrixError):
            solve_zero_sum(np.array([[np.nan, 0.0], [0.0, 0.0]]))

    def test_soundness_random_matrices(self):
        # maximin/minimax inequalities hold within tol on 1000 random games
        rng = np.random.default_rng(0)
        tol = 1e-8
        for _ in range(1000):
            m = int(rng.integers(2, 7))
            n = int(rng.integers(2, 7))
            u = rng.uniform(-5, 5, size=(m, n))
            sol = solve_zero_sum(u, tol=tol)
            assert np.min(sol.sigma_row.probs @ u) >= sol.value - tol
            assert np.max(u @ sol.sigma_col.probs) <= sol.value + tol

    def test_regret_matching_fallback(self):
        sol = solve_zero_sum(RPS, tol=1e-3, method="regret")
        assert np.allclose(sol.sigma_row.probs, 1.0 / 3.0, atol=0.02)
        assert abs(sol.value) < 0.01
        assert exact_exploitability(RPS, sol.sigma_row, sol.sigma_col) <= 2e-3

    def test_nonsquare_game(self):
        u = np.array([[1.0, -1.0, 0.5], [0.0, 2.0, -0.5]])
        sol = solve_zero_sum(u)
        assert np.min(sol.sigma_row.probs @ u) >= sol.value - 1e-8
        assert np.max(u @ sol.sigma_col.probs) <= sol.value + 1e-8


class TestExactExploitability:
    def test_zero_at_equilibrium(self):
        sol = solve_zero_sum(RPS)
        assert abs(exact_exploitability(RPS, sol.sigma_row, sol.sigma_col)) <= 1e-8

    def test_rock_vs_uniform_is_one(self):
        rock = MetaStrategy(np.array([1.0, 0.0, 0.0]))
        uniform = MetaStrategy(np.full(3, 1.0 / 3.0))
        assert exact_exploitability(RPS, rock, uniform) == pytest.approx(1.0, abs=1e-12)

    def test_nonnegative_up_to_tolerance(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            u = rng.uniform(-2, 2, size=(4, 5))
            r = rng.dirichlet(np.ones(4))
            c = rng.dirichlet(np.ones(5))
            e = exact_exploitability(u, MetaStrategy(r), MetaStrategy(c))
            assert e >= -2e-8


class TestDoubleOracle:
    def test_rps_from_rock(self):
        sol, iters, trace = double_oracle_matrix(RPS, initial=(0, 0))
        assert iters <= 4
        assert abs(sol.value) <= 1e-9
        assert np.allclose(sol.sigma_row.probs, 1.0 / 3.0, atol=1e-8)
        assert exact_exploitability(RPS, sol.sigma_row, sol.sigma_col) <= 1e-8

    def test_pure_saddle_two_iterations(self):
        # row 0 and column 1 are strictly dominant, so the best response to
        # anything is the saddle and the loop stops within two iterations
        u = np.array([[2.0, 1.0, 3.0], [1.0, 0.0, 2.0], [1.5, 0.5, 2.5]])
        sol_full = solve_zero_sum(u)
        assert sol_full.value == pytest.approx(1.0, abs=1e-9)
        for seed in range(10):
            sol, iters, trace = double_oracle_matrix(u, seed=seed)
            assert iters <= 2
            assert sol.value == pytest.approx(1.0, abs=1e-9)
            assert sol.sigma_row.probs[0] == pytest.approx(1.0, abs=1e-8)
            assert sol.sigma_col.probs[1] == pytest.approx(1.0, abs=1e-8)

    def test_random_8x8_hundred_seeds(self):
        rng = np.random.default_rng(2)
        for seed in range(100):
            u = rng.uniform(-1, 1, size=(8, 8))
            sol, iters, trace = double_oracle_matrix(u, seed=seed)
            full = solve_zero_sum(u)
            assert abs(sol.value - full.value) <= 1e-6
            assert exact_exploitability(u, sol.sigma_row, sol.sigma_col) <= 1e-6

    def test_population_growth_per_iteration(self):
        rng = np.random.default_rng(5)
        u = rng.uniform(-1, 1, size=(6, 6))
        _, iters, trace = double_oracle_matrix(u, seed=0)
        for k in range(1, len(trace.rows)):
            grew = (len(trace.rows[k]) > len(trace.rows[k - 1])
                    or len(trace.cols[k]) > len(trace.cols[k - 1]))
            assert grew

    def test_exploitability_trace_nonnegative(self):
        rng = np.random.default_rng(6)
        u = rng.uniform(-1, 1, size=(7, 7))
        _, _, trace = double_oracle_matrix(u, seed=1)
        assert all(e >= -1e-9 for e in trace.exploitabilities)
        assert trace.exploitabilities[-1] <= 1e-8


class TestPayoffMatrix:
    def test_growth_and_completion(self):
        pm = PayoffMatrix(min_count=2)
        pm.add_row()
        pm.add_col()
        assert pm.missing() == [(0, 0)]
        pm.set_entry(0, 0, 1.5, 0.1, 3)
        assert pm.missing() == []
        assert pm.as_array()[0, 0] == 1.5

    def test_min_count_enforced(self):
        pm = PayoffMatrix(min_count=5)
        pm.add_row()
        pm.add_col()
        pm.set_entry(0, 0, 1.0, 0.0, 2)
        with pytest.raises(MatrixError):
            pm.as_array()

    def test_round_trip(self):
        pm = PayoffMatrix(min_count=1)
        for _ in range(2):
            pm.add_row()
            pm.add_col()
        for i in range(2):
            for j in range(2):
                pm.set_entry(i, j, i + 0.5 * j, 0.01, 4)
        again = PayoffMatrix.from_dict(pm.to_dict())
        assert np.array_equal(again.as_array(), pm.as_array())
        assert np.array_equal(again.counts_array(), pm.counts_array())

    def test_csv_export(self, tmp_path):
        pm = PayoffMatrix(min_count=1)
        pm.add_row()
        pm.add_col()
        pm.set_entry(0, 0, 0.25, 0.0, 1)
        path = str(tmp_path / "payoff.csv")
        pm.write_csv(path)
        text = open(path).read()
        assert "0.25" in text
        import json

        sidecar = json.load(open(path + ".meta.json"))
        assert sidecar["counts"] == [[1]]


class TestEstimatePayoffEntry:
    def test_pure_vs_pure_exact(self):
        payoff = np.random.default_rng(3).uniform(-1, 1, size=(3, 3))
        env = make_matrix_game_env(payoff)
        rng = np.random.default_rng(0)
        mean, stderr = estimate_payoff_entry(
            make_pure_discrete_policy(3, 1), make_opponent(make_pure_discrete_policy(3, 2)),
            env, 20, rng)
        assert mean == payoff[1, 2]
        assert stderr == 0.0

    def test_uniform_rps_concentrates(self):
        env = make_matrix_game_env(RPS)
        uniform = Policy(ArchSpec(1, 3, head="categorical"),
                         params=np.zeros(ArchSpec(1, 3, head="categorical").param_count))
        opp = make_opponent(uniform.copy())
        rng = np.random.default_rng(1)
        mean, stderr = estimate_payoff_entry(uniform, opp, env, 10_000, rng)
        assert abs(mean) <= 3.0 * stderr

    def test_same_seed_same_mean(self):
        env = make_matrix_game_env(RPS)
        uniform = Policy(ArchSpec(1, 3, head="categorical"),
                         params=np.zeros(ArchSpec(1, 3, head="categorical").param_count))
        opp = make_opponent(uniform.copy())
        m1, _ = estimate_payoff_entry(uniform, opp, env, 100, np.random.default_rng(7))
        m2, _ = estimate_payoff_entry(uniform, opp, env, 100, np.random.default_rng(7))
        assert m1 == m2


class TestApproxExploitability:
    def test_oracle_callable_route(self):
        # enumeration oracle: approximate exploitability equals the exact one
        from gradrl.meta_game import approx_exploitability

        sigma_row = MetaStrategy(np.array([1.0, 0.0, 0.0]))  # pure Rock
        sigma_col = MetaStrategy(np.full(3, 1.0 / 3.0))

        def enumeration_br(side, opponent_meta):
            if side == "agent":
                payoffs = RPS @ opponent_meta.probs
                return int(np.argmax(payoffs)), float(np.max(payoffs))
            payoffs = opponent_meta.probs @ RPS
            return int(np.argmin(payoffs)), float(-np.min(payoffs))

        e = approx_exploitability(sigma_row, sigma_col, enumeration_br)
        assert e == pytest.approx(
            exact_exploitability(RPS, sigma_row, sigma_col), abs=1e-12)
        assert e == pytest.approx(1.0, abs=1e-12)
