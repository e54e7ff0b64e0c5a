import numpy as np
import pytest

from gradrl.adversaries import (
    AdversaryKind,
    director_arch_for,
    make_acad,
    make_memorized,
    make_mixed,
    make_model_uncertainty,
    make_opponent,
    make_paad,
    make_random,
)
from gradrl.envs import make_balance_env, make_matrix_game_env, make_pointmass_env
from gradrl.perturb import AttackDomain, PerturbationBudget, check_sequence
from gradrl.policy import ArchSpec, Policy, make_pure_discrete_policy
from gradrl.rollout import RolloutError, rollout


def agent_for(env, seed=0):
    spec = env.spec
    if spec.action_kind == "discrete-finite":
        return Policy(ArchSpec(spec.state_dim, spec.action_dim, head="categorical"),
                      rng=np.random.default_rng(seed))
    return Policy(ArchSpec(spec.state_dim, spec.action_dim, head="gaussian"),
                  action_bounds=spec.action_bounds, rng=np.random.default_rng(seed))


def paad_for(env, eps=0.1, ebar=0.02, seed=0, scale=2.0):
    arch = director_arch_for(AdversaryKind.PAAD, env.spec.state_dim, env.spec.action_dim)
    director = Policy(arch, rng=np.random.default_rng(seed))
    director.params[: director.mlp.n_params] += scale * np.random.default_rng(seed + 7) \
        .standard_normal(director.mlp.n_params)
    return make_paad(director, PerturbationBudget(eps, ebar, domain=AttackDomain.STATE))


class TestBasics:
    def test_no_adversary_identity_views(self):
        env = make_pointmass_env(goal=(0.5, 0.5), seed=0)
        traj = rollout(env, agent_for(env), seed=3)
        assert np.array_equal(traj.perturbed_states, traj.states)
        assert np.array_equal(traj.executed_actions, traj.actions)
        assert np.all(traj.state_perturbations == 0.0)
        assert traj.length == 100

    def test_zero_sum_bookkeeping_exact(self):
        env = make_balance_env(seed=1)
        traj = rollout(env, agent_for(env), seed=5)
        assert np.all(traj.rewards + traj.adv_rewards == 0.0)

    def test_budget_without_adversary_rejected(self):
        env = make_balance_env()
        with pytest.raises(RolloutError):
            rollout(env, agent_for(env),
                    budget=PerturbationBudget(0.1, 0.02), seed=0)

    def test_matrix_game_records_opponent(self):
        env = make_matrix_game_env([[0, -1], [1, 0]])
        traj = rollout(env, make_pure_discrete_policy(2, 0),
                       adversary=make_opponent(make_pure_discrete_policy(2, 1)),
                       seed=0)
        assert traj.length == 1
        assert traj.rewards[0] == -1.0
        assert traj.opponent_actions.tolist() == [1]
        assert traj.adv_logprobs is not None

    def test_opponent_on_single_player_rejected(self):
        env = make_balance_env()
        with pytest.raises(RolloutError):
            rollout(env, agent_for(env),
                    adversary=make_opponent(make_pure_discrete_policy(2, 0)), seed=0)

    def test_perturber_on_matrix_game_rejected(self):
        env = make_matrix_game_env([[0, 1], [1, 0]])
        with pytest.raises(RolloutError):
            rollout(env, make_pure_discrete_policy(2, 0),
                    adversary=paad_for(make_balance_env()), seed=0)


class TestDeterminism:
    def test_identical_seeds_identical_trajectories(self):
        env = make_pointmass_env(goal=(0.2, -0.4), seed=9)
        a = agent_for(env, seed=2)
        t1 = rollout(env, a, seed=77)
        t2 = rollout(env, a, seed=77)
        assert np.array_equal(t1.states, t2.states)
        assert np.array_equal(t1.actions, t2.actions)
        assert np.array_equal(t1.rewards, t2.rewards)
        assert np.array_equal(t1.logprobs, t2.logprobs)

    def test_zero_perturbation_adversary_leaves_trajectory_unchanged(self):
        # epsilon = 0 attachment must reproduce the unattacked rollout bitwise
        env = make_pointmass_env(goal=(0.2, -0.4), seed=9)
        a = agent_for(env, seed=2)
        base = rollout(env, a, seed=31)
        att = paad_for(env, eps=0.0, ebar=0.0)
        attacked = rollout(env, a, adversary=att, seed=31)
        assert np.array_equal(attacked.states, base.states)
        assert np.array_equal(attacked.actions, base.actions)
        assert np.array_equal(attacked.rewards, base.rewards)
        assert np.array_equal(attacked.perturbed_states, base.states)

    def test_alpha_zero_model_uncertainty_identical(self):
        env = make_balance_env(seed=4)
        a = agent_for(env, seed=3)
        base = rollout(env, a, seed=13)
        att = make_model_uncertainty(0.0)
        replaced = rollout(env, a, adversary=att, budget=att.budget, seed=13)
        assert np.array_equal(replaced.rewards, base.rewards)
        assert np.array_equal(replaced.executed_actions, base.executed_actions)


class TestPerturbingRollouts:
    def test_paad_budget_respected_and_recorded(self):
        env = make_pointmass_env(goal=(0.5, 0.0), seed=1)
        att = paad_for(env, eps=0.1, ebar=0.02, scale=5.0)
        traj = rollout(env, agent_for(env), adversary=att, seed=4)
        assert np.array_equal(traj.executed_actions, traj.actions)
        assert np.max(np.abs(traj.perturbed_states - traj.states)) <= 0.1 + 1e-9
        report = check_sequence(list(traj.state_perturbations), att.budget)
        assert report.passed
        assert traj.adv_observations.shape == (traj.length, 8)
        assert traj.adv_logprobs.shape == (traj.length,)

    def test_constant_push_stub_perturbations(self):
        # a saturated director pushes at +epsilon in every coordinate; the
        # recorded sequence sits on the ball boundary with zero step change
        env = make_pointmass_env(goal=(0.5, 0.0), seed=1)
        eps = 0.1
        arch = director_arch_for(AdversaryKind.PAAD, 4, 2)
        director = Policy(arch, rng=np.random.default_rng(0))
        director.params[: director.mlp.n_params] = 0.0
        w_sl, b_sl, _, _ = director.mlp._slices[-1]
        director.params[b_sl] = 40.0  # tanh saturates to 1
        att = make_paad(director, PerturbationBudget(eps, 0.02,
                                                     domain=AttackDomain.STATE))
        traj = rollout(env, agent_for(env), adversary=att, seed=4,
                       adversary_mode="mean")
        p = traj.state_perturbations
        assert np.allclose(np.abs(p), eps)
        assert np.max(np.abs(np.diff(p, axis=0))) <= 1e-12

    def test_acad_rollout(self):
        env = make_balance_env(seed=2)
        arch = director_arch_for(AdversaryKind.ACAD, 2, 1)
        director = Policy(arch, rng=np.random.default_rng(1))
        att = make_acad(director, PerturbationBudget(0.2, 0.05,
                                                     domain=AttackDomain.ACTION))
        traj = rollout(env, agent_for(env), adversary=att, seed=6)
        assert np.array_equal(traj.perturbed_states, traj.states)
        assert check_sequence(list(traj.action_perturbations), att.budget).passed
        assert np.all(traj.executed_actions >= -1.0)
        assert np.all(traj.executed_actions <= 1.0)

    def test_mixed_rollout(self):
        env = make_pointmass_env(goal=(0.0, 0.5), seed=3)
        arch = director_arch_for(AdversaryKind.MIXED, 4, 2)
        director = Policy(arch, rng=np.random.default_rng(2))
        att = make_mixed(director,
                         PerturbationBudget(0.1, 0.02, domain=AttackDomain.STATE),
                         PerturbationBudget(0.05, 0.01, domain=AttackDomain.ACTION))
        traj = rollout(env, agent_for(env), adversary=att, seed=8)
        assert check_sequence(list(traj.state_perturbations), att.state_budget).passed
        assert check_sequence(list(traj.action_perturbations), att.action_budget).passed

    def test_memorized_rollout(self):
        env = make_pointmass_env(goal=(0.3, 0.3), seed=4)
        arch = director_arch_for(AdversaryKind.MEMORIZED, 4, 2)
        director = Policy(arch, rng=np.random.default_rng(3))
        att = make_memorized(director, PerturbationBudget(0.1, 0.05,
                                                          domain=AttackDomain.STATE))
        traj = rollout(env, agent_for(env), adversary=att, seed=9)
        assert np.max(np.abs(traj.state_perturbations)) <= 0.1 + 1e-9

    def test_random_state_attack(self):
        env = make_balance_env(seed=5)
        att = make_random(PerturbationBudget(0.05, 0.01, domain=AttackDomain.STATE))
        traj = rollout(env, agent_for(env), adversary=att, seed=10)
        assert check_sequence(list(traj.state_perturbations), att.budget).passed

    def test_model_uncertainty_replaces_fraction(self):
        env = make_balance_env(seed=6)
        att = make_model_uncertainty(0.5)
        # mean-mode agent so replacements are visible as action mismatches
        traj = rollout(env, agent_for(env), adversary=att, budget=att.budget,
                       seed=11, agent_mode="mean")
        mismatch = np.any(traj.executed_actions != traj.actions, axis=-1)
        assert 0.2 < mismatch.mean() < 0.8

    def test_schedule_budget_override(self):
        # rollout budget overrides the attachment's construction-time budget
        env = make_pointmass_env(goal=(0.5, 0.0), seed=1)
        att = paad_for(env, eps=0.5, ebar=0.5, scale=5.0)
        small = PerturbationBudget(0.01, 0.002, domain=AttackDomain.STATE)
        traj = rollout(env, agent_for(env), adversary=att, budget=small, seed=12)
        assert np.max(np.abs(traj.state_perturbations)) <= 0.01 + 1e-9
        assert check_sequence(list(traj.state_perturbations), small).passed


class TestEarlyTermination:
    def test_balance_fall_flagged(self):
        env = make_balance_env(seed=7)
        traj = rollout(env, agent_for(env), seed=14,
                       start_state=np.array([np.pi / 4, 0.0]))
        assert traj.early_terminated
        assert traj.length < 200
