"""Episode collection: drive an environment with an agent and an optional
adversary attachment, recording both sides' training views.

Each rollout derives three independent rng streams (environment, agent,
adversary) from one seed, so attaching an adversary that cannot perturb
(epsilon = 0, or alpha = 0 model uncertainty) leaves the agent/environment
streams, and therefore the trajectory, bitwise unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adversaries import (
    AdversaryAttachment,
    AdversaryKind,
    acad_step,
    mixed_step,
    opponent_step,
    paad_step,
    random_step,
)
from .envs import Environment
from .perturb import (
    AttackDomain,
    apply_model_uncertainty,
    check_sequence,
    vector_norm,
)
from .policy import Policy


class RolloutError(RuntimeError):
    """Rollout preconditions violated."""


class ProjectionContractError(RuntimeError):
    """A recorded perturbation sequence failed its own budget audit."""


@dataclass
class Trajectory:
    """Per-step record of one episode, agent view plus adversary view."""

    states: np.ndarray
    perturbed_states: np.ndarray
    actions: np.ndarray
    executed_actions: np.ndarray
    state_perturbations: np.ndarray
    action_perturbations: np.ndarray | None
    rewards: np.ndarray
    logprobs: np.ndarray
    adv_rewards: np.ndarray
    early_terminated: bool
    final_state: np.ndarray
    raw_actions: np.ndarray | None = None  # pre-clipping samples (continuous)
    adv_observations: np.ndarray | None = None
    adv_actions: np.ndarray | None = None
    adv_logprobs: np.ndarray | None = None
    opponent_actions: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))


def _resolve_budgets(adversary: AdversaryAttachment | None, budget):
    """Active budgets for this rollout; explicit arg overrides the attachment."""
    if adversary is None:
        if budget is not None:
            raise RolloutError("budget given without an adversary")
        return None, None
    if adversary.kind is AdversaryKind.OPPONENT:
        return None, None
    if adversary.kind is AdversaryKind.MIXED:
        pair = (adversary.state_budget, adversary.action_budget) if budget is None \
            else tuple(budget)
        if pair[0] is None or pair[1] is None:
            raise RolloutError("mixed adversary requires state and action budgets")
        return pair
    b = budget if budget is not None else adversary.budget
    if b is None:
        raise RolloutError("perturbing adversary requires a budget")
    if b.domain in (AttackDomain.ACTION, AttackDomain.MODEL_UNCERTAINTY):
        return None, b
    return b, None


def rollout(env: Environment, agent: Policy,
            adversary: AdversaryAttachment | None = None,
            budget=None, seed: int | np.random.SeedSequence = 0,
            agent_mode: str = "sample", adversary_mode: str = "sample",
            start_state=None) -> Trajectory:
    """Collect one full episode and audit any recorded perturbations."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    env_ss, agent_ss, adv_ss = ss.spawn(3)
    env.seed(env_ss)
    agent_rng = np.random.default_rng(agent_ss)
    adv_rng = np.random.default_rng(adv_ss)

    state_budget, action_budget = _resolve_budgets(adversary, budget)
    contexts = adversary.new_contexts() if adversary is not None else {}
    kind = adversary.kind if adversary is not None else None
    spec = env.spec
    if agent.arch.obs_dim != spec.state_dim:
        raise RolloutError(
            f"agent expects {agent.arch.obs_dim}-dim observations, environment "
            f"emits {spec.state_dim}")
    discrete = spec.action_kind == "discrete-finite"
    if kind is AdversaryKind.OPPONENT and not env.two_player:
        raise RolloutError("opponent attachments only apply to two-player games")
    if env.two_player and adversary is not None and kind is not AdversaryKind.OPPONENT:
        raise RolloutError("two-player games take an opponent attachment")

    s = env.reset(start_state) if start_state is not None else env.reset()
    states, perturbed, actions, executed, raw_actions = [], [], [], [], []
    p_state, p_action = [], []
    rewards, logprobs = [], []
    adv_obs, adv_act, adv_lp, opp_actions = [], [], [], []
    done = False
    early = False

    while not done:
        s = np.asarray(s, dtype=float)
        ps = np.zeros(spec.state_dim)
        pa = None if discrete else np.zeros(spec.action_dim)
        rec = None
        opp = None

        if kind is AdversaryKind.MIXED:
            raw_box = {}

            def act_cb(obs):
                act, lp_cb, raw = agent.act(obs, mode=agent_mode, rng=agent_rng,
                                            with_raw=True)
                raw_box["raw"] = raw
                return act, lp_cb

            s_tilde, ps, a, lp, a_exec, pa, rec = mixed_step(
                adversary, s, act_cb, contexts, state_budget, action_budget,
                adv_rng, spec.action_bounds, mode=adversary_mode)
            raw_a = raw_box["raw"]
        else:
            s_tilde = s
            if kind in (AdversaryKind.PAAD, AdversaryKind.MEMORIZED):
                s_tilde, rec = paad_step(adversary, s, contexts, state_budget,
                                         adv_rng, mode=adversary_mode,
                                         action_dim=spec.action_dim)
                ps = rec.perturbation
            elif kind is AdversaryKind.RANDOM and state_budget is not None:
                s_tilde, rec = random_step(adversary, s, contexts, state_budget,
                                           adv_rng)
                ps = rec.perturbation

            a, lp, raw_a = agent.act(s_tilde, mode=agent_mode, rng=agent_rng,
                                     with_raw=True)
            a_exec = a

            if kind is AdversaryKind.ACAD:
                a_exec, rec = acad_step(adversary, s, a, contexts, action_budget,
                                        adv_rng, spec.action_bounds,
                                        mode=adversary_mode)
                pa = rec.perturbation
            elif kind is AdversaryKind.RANDOM and action_budget is not None:
                if action_budget.domain is AttackDomain.MODEL_UNCERTAINTY:
                    a_exec = apply_model_uncertainty(a, action_budget.alpha, adv_rng,
                                                     spec.action_bounds)
                else:
                    a_exec, rec = random_step(adversary, a, contexts, action_budget,
                                              adv_rng)
                    pa = rec.perturbation
            elif kind is AdversaryKind.OPPONENT:
                opp, rec = opponent_step(adversary, s, adv_rng, mode=adversary_mode)

        next_s, r, done = env.step(a_exec, opponent_action=opp)
        if done and env.t < spec.horizon:
            early = True

        states.append(s)
        perturbed.append(np.asarray(s_tilde, dtype=float))
        actions.append(a)
        executed.append(a_exec)
        raw_actions.append(raw_a)
        p_state.append(ps)
        if pa is not None:
            p_action.append(pa)
        rewards.append(float(r))
        logprobs.append(float(lp))
        if rec is not None and rec.adv_obs is not None:
            adv_obs.append(rec.adv_obs)
            adv_act.append(rec.adv_action)
            adv_lp.append(rec.adv_logprob)
        if opp is not None:
            opp_actions.append(opp)
        s = next_s

    rewards_arr = np.asarray(rewards, dtype=float)
    if discrete:
        actions_arr = np.asarray(actions, dtype=int)
        executed_arr = np.asarray(executed, dtype=int)
        raw_arr = actions_arr
        pact_arr = None
    else:
        actions_arr = np.asarray(actions, dtype=float)
        executed_arr = np.asarray(executed, dtype=float)
        raw_arr = np.asarray(raw_actions, dtype=float)
        pact_arr = np.asarray(p_action, dtype=float)

    traj = Trajectory(
        states=np.asarray(states, dtype=float),
        perturbed_states=np.asarray(perturbed, dtype=float),
        actions=actions_arr,
        executed_actions=executed_arr,
        state_perturbations=np.asarray(p_state, dtype=float),
        action_perturbations=pact_arr,
        rewards=rewards_arr,
        logprobs=np.asarray(logprobs, dtype=float),
        adv_rewards=-rewards_arr,
        early_terminated=early,
        final_state=np.asarray(s, dtype=float),
        raw_actions=raw_arr,
        adv_observations=np.asarray(adv_obs, dtype=float) if adv_obs else None,
        adv_actions=np.asarray(adv_act) if adv_act else None,
        adv_logprobs=np.asarray(adv_lp, dtype=float) if adv_lp else None,
        opponent_actions=np.asarray(opp_actions, dtype=int) if opp_actions else None,
    )
    _audit(traj, adversary, state_budget, action_budget)
    return traj


def _audit(traj: Trajectory, adversary, state_budget, action_budget) -> None:
    """Raise if any recorded perturbation sequence violates its budget."""
    if adversary is None:
        return
    kind = adversary.kind
    if state_budget is not None and kind in (
            AdversaryKind.PAAD, AdversaryKind.MIXED, AdversaryKind.RANDOM):
        if not check_sequence(list(traj.state_perturbations), state_budget).passed:
            raise ProjectionContractError("state perturbation sequence failed audit")
    if state_budget is not None and kind is AdversaryKind.MEMORIZED:
        window = []
        for p in traj.state_perturbations:
            if vector_norm(p, state_budget.norm) > state_budget.epsilon + 1e-9:
                raise ProjectionContractError("memorized perturbation above epsilon")
            if window:
                m = np.mean(np.asarray(window), axis=0)
                if vector_norm(p - m, state_budget.norm) > state_budget.epsilon_bar + 1e-9:
                    raise ProjectionContractError("memorized perturbation broke coupling")
            window.append(p)
            if len(window) > adversary.memory_window:
                window.pop(0)
    if action_budget is not None and action_budget.domain is AttackDomain.ACTION \
            and traj.action_perturbations is not None and len(traj.action_perturbations):
        if not check_sequence(list(traj.action_perturbations), action_budget).passed:
            raise ProjectionContractError("action perturbation sequence failed audit")
