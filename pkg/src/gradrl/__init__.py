"""Game-theoretic robust RL: double-oracle training of agents against
temporally-coupled adversaries, with desk-scale verification substrates."""

from .adversaries import (
    AdversaryAttachment,
    AdversaryKind,
    make_acad,
    make_memorized,
    make_mixed,
    make_model_uncertainty,
    make_opponent,
    make_paad,
    make_random,
)
from .engine import BudgetSchedule, EngineConfig, GradState, grad_epoch, run_grad
from .envs import (
    Environment,
    EnvSpec,
    make_balance_env,
    make_env,
    make_matrix_game_env,
    make_pointmass_env,
)
from .meta_game import (
    MetaStrategy,
    PayoffMatrix,
    RestrictedGameSolution,
    double_oracle_matrix,
    estimate_payoff_entry,
    exact_exploitability,
    solve_zero_sum,
)
from .oracle import OracleConfig, gae_advantages, train_best_response
from .perturb import (
    AttackDomain,
    CouplingContext,
    PerturbationBudget,
    apply_model_uncertainty,
    check_sequence,
    project_admissible,
    project_coupled,
)
from .policy import ArchSpec, Policy, ValueFunction, load_policy, policy_act, save_policy
from .rollout import Trajectory, rollout

__version__ = "0.1.0"
