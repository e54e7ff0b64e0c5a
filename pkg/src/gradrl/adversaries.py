"""Adversary attachments: director policies plus actor functions that turn a
perturbing direction into a budget-feasible perturbation.

The director observes the victim state concatenated with the previous applied
perturbation (zeros at t = 0; the buffer mean for the memorized variant), so
it can exploit the temporally-coupled feasible set without recurrence. The
actor function squashes the director output into the epsilon ball
(p_raw = epsilon * tanh(d)) and projects onto the coupled feasible set.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .perturb import (
    AttackDomain,
    BudgetError,
    CouplingContext,
    PerturbationBudget,
    project_admissible,
    project_coupled,
    sample_ball,
    vector_norm,
)
from .policy import ArchSpec, Policy

MEMORY_WINDOW = 10


class AdversaryKind(str, Enum):
    PAAD = "paad"
    ACAD = "acad"
    MIXED = "mixed"
    MEMORIZED = "memorized"
    RANDOM = "random"
    OPPONENT = "opponent"  # matrix-game column player, no perturbation


@dataclass
class PerturbRecord:
    """One adversary step as the adversary's own training view sees it."""

    perturbation: np.ndarray | None
    adv_obs: np.ndarray | None
    adv_action: np.ndarray | int | None
    adv_logprob: float | None


@dataclass
class AdversaryAttachment:
    kind: AdversaryKind
    director: Policy | None = None
    budget: PerturbationBudget | None = None
    state_budget: PerturbationBudget | None = None
    action_budget: PerturbationBudget | None = None
    memory_window: int = MEMORY_WINDOW

    # -- construction-time wiring -------------------------------------------

    def new_contexts(self):
        """Fresh per-rollout coupling contexts, keyed by domain."""
        if self.kind is AdversaryKind.MIXED:
            return {"state": CouplingContext(), "action": CouplingContext()}
        if self.kind is AdversaryKind.MEMORIZED:
            return {"state": CouplingContext(window=self.memory_window)}
        if self.kind is AdversaryKind.OPPONENT:
            return {}
        domain = (self.budget.domain if self.budget is not None else AttackDomain.STATE)
        key = "action" if domain is AttackDomain.ACTION else "state"
        return {key: CouplingContext()}

    def director_obs(self, state: np.ndarray, contexts, state_dim: int, action_dim: int):
        s = np.asarray(state, dtype=float)
        if self.kind is AdversaryKind.OPPONENT:
            return s
        if self.kind is AdversaryKind.MIXED:
            ps = contexts["state"].prev
            pa = contexts["action"].prev
            return np.concatenate([
                s,
                np.zeros(state_dim) if ps is None else ps,
                np.zeros(action_dim) if pa is None else pa,
            ])
        if self.kind is AdversaryKind.MEMORIZED:
            m = contexts["state"].buffer_mean()
            return np.concatenate([s, np.zeros(state_dim) if m is None else m])
        ctx = next(iter(contexts.values()))
        dim = action_dim if self._single_domain() is AttackDomain.ACTION else state_dim
        prev = ctx.prev if ctx.prev is not None else np.zeros(dim)
        return np.concatenate([s, prev])

    def _single_domain(self) -> AttackDomain:
        if self.budget is None:
            raise BudgetError(f"{self.kind.value} attachment has no budget")
        return self.budget.domain


def director_arch_for(kind: AdversaryKind, state_dim: int, action_dim: int,
                      hidden=(64, 64)) -> ArchSpec:
    """Observation/output dimensions each adversary kind's director needs."""
    if kind is AdversaryKind.OPPONENT:
        raise ValueError("opponent attachments wrap an ordinary policy")
    if kind is AdversaryKind.PAAD:
        return ArchSpec(state_dim + state_dim, state_dim, hidden, head="gaussian")
    if kind is AdversaryKind.ACAD:
        return ArchSpec(state_dim + action_dim, action_dim, hidden, head="gaussian")
    if kind is AdversaryKind.MEMORIZED:
        return ArchSpec(state_dim + state_dim, state_dim, hidden, head="gaussian")
    if kind is AdversaryKind.MIXED:
        shared = max(state_dim, action_dim)
        return ArchSpec(state_dim + state_dim + action_dim, shared, hidden, head="gaussian")
    raise ValueError(f"{kind} has no director")


def make_paad(director: Policy, budget: PerturbationBudget) -> AdversaryAttachment:
    if budget.domain is not AttackDomain.STATE:
        raise BudgetError("PA-AD requires a state-domain budget")
    return AdversaryAttachment(AdversaryKind.PAAD, director=director, budget=budget)


def make_acad(director: Policy, budget: PerturbationBudget) -> AdversaryAttachment:
    if budget.domain is not AttackDomain.ACTION:
        raise BudgetError("AC-AD requires an action-domain budget")
    return AdversaryAttachment(AdversaryKind.ACAD, director=director, budget=budget)


def make_mixed(director: Policy, state_budget: PerturbationBudget,
               action_budget: PerturbationBudget) -> AdversaryAttachment:
    if state_budget is None or action_budget is None:
        raise BudgetError("mixed adversary requires both a state and an action budget")
    return AdversaryAttachment(AdversaryKind.MIXED, director=director,
                               state_budget=state_budget, action_budget=action_budget)


def make_memorized(director: Policy, budget: PerturbationBudget,
                   window: int = MEMORY_WINDOW) -> AdversaryAttachment:
    return AdversaryAttachment(AdversaryKind.MEMORIZED, director=director,
                               budget=budget, memory_window=window)


def make_random(budget: PerturbationBudget) -> AdversaryAttachment:
    return AdversaryAttachment(AdversaryKind.RANDOM, budget=budget)


def make_model_uncertainty(alpha: float) -> AdversaryAttachment:
    budget = PerturbationBudget(0.0, 0.0, domain=AttackDomain.MODEL_UNCERTAINTY,
                                alpha=alpha)
    return AdversaryAttachment(AdversaryKind.RANDOM, budget=budget)


def make_opponent(policy: Policy) -> AdversaryAttachment:
    return AdversaryAttachment(AdversaryKind.OPPONENT, director=policy)


# -- actor functions ----------------------------------------------------------


def _squash(direction: np.ndarray, epsilon: float) -> np.ndarray:
    return epsilon * np.tanh(np.asarray(direction, dtype=float))


def memorized_project(p_raw: np.ndarray, buffer, budget: PerturbationBudget) -> np.ndarray:
    """Nearest feasible point when coupling anchors to the buffer mean.

    Feasible set: {||p|| <= eps} inter {||p - mean(buffer)|| <= eps_bar}.
    An empty buffer reduces to the plain admissible projection.
    """
    entries = list(buffer)
    if not entries:
        return project_admissible(p_raw, budget)
    mean = np.mean(np.asarray(entries, dtype=float), axis=0)
    ctx = CouplingContext(prev=mean)
    return project_coupled(p_raw, ctx, budget)


def random_adversary(budget: PerturbationBudget, ctx: CouplingContext | None,
                     rng: np.random.Generator, dim: int | None = None) -> np.ndarray:
    """Uniform draw from the coupled feasible set by rejection sampling.

    Falls back to projecting a fresh ball sample after 100 rejections.
    """
    prev = None if ctx is None else ctx.prev
    if dim is None:
        if prev is None:
            raise BudgetError("random_adversary needs dim when the context is empty")
        dim = prev.shape[0]
    if budget.epsilon == 0.0:
        return np.zeros(dim)
    cand = sample_ball(dim, budget, rng)
    if prev is None:
        return cand
    for _ in range(100):
        if vector_norm(cand - prev, budget.norm) <= budget.epsilon_bar:
            return cand
        cand = sample_ball(dim, budget, rng)
    return project_coupled(cand, ctx, budget)


# -- per-step adversary execution ---------------------------------------------


def _director_sample(att: AdversaryAttachment, obs: np.ndarray,
                     rng: np.random.Generator, mode: str):
    action, logprob = att.director.act(obs, mode=mode, rng=rng)
    return np.asarray(action, dtype=float), float(logprob)


def paad_step(att: AdversaryAttachment, state: np.ndarray, contexts,
              budget: PerturbationBudget, rng: np.random.Generator,
              mode: str = "sample", action_dim: int = 0):
    """PA-AD state perturbation: direction -> squash -> coupled projection."""
    state = np.asarray(state, dtype=float)
    ctx = contexts["state"]
    obs = att.director_obs(state, contexts, state.shape[0], action_dim)
    d_hat, logprob = _director_sample(att, obs, rng, mode)
    p_raw = _squash(d_hat, budget.epsilon)
    if att.kind is AdversaryKind.MEMORIZED:
        p = memorized_project(p_raw, ctx.buffer, budget)
    else:
        p = project_coupled(p_raw, ctx, budget)
    ctx.update(p)
    rec = PerturbRecord(p, obs, d_hat, logprob)
    return state + p, rec


def acad_step(att: AdversaryAttachment, state: np.ndarray, action: np.ndarray,
              contexts, budget: PerturbationBudget, rng: np.random.Generator,
              bounds: np.ndarray, mode: str = "sample"):
    """AC-AD action perturbation applied to the victim's chosen action."""
    state = np.asarray(state, dtype=float)
    action = np.asarray(action, dtype=float)
    ctx = contexts["action"]
    obs = att.director_obs(state, contexts, state.shape[0], action.shape[0])
    a_hat, logprob = _director_sample(att, obs, rng, mode)
    p = project_coupled(_squash(a_hat, budget.epsilon), ctx, budget)
    ctx.update(p)
    perturbed = np.clip(action + p, bounds[:, 0], bounds[:, 1])
    rec = PerturbRecord(p, obs, a_hat, logprob)
    return perturbed, rec


def mixed_step(att: AdversaryAttachment, state: np.ndarray, act_callback, contexts,
               state_budget: PerturbationBudget, action_budget: PerturbationBudget,
               rng: np.random.Generator, bounds: np.ndarray, mode: str = "sample"):
    """Single shared direction drives both the state and the action actor.

    The victim acts once, on the perturbed state, through ``act_callback``.
    """
    state = np.asarray(state, dtype=float)
    ctx_s, ctx_a = contexts["state"], contexts["action"]
    state_dim = state.shape[0]
    action_dim = bounds.shape[0]
    obs = att.director_obs(state, contexts, state_dim, action_dim)
    d_hat, logprob = _director_sample(att, obs, rng, mode)
    p_s = project_coupled(_squash(d_hat[:state_dim], state_budget.epsilon), ctx_s,
                          state_budget)
    ctx_s.update(p_s)
    s_tilde = state + p_s
    action, action_logprob = act_callback(s_tilde)
    p_a = project_coupled(_squash(d_hat[:action_dim], action_budget.epsilon), ctx_a,
                          action_budget)
    ctx_a.update(p_a)
    a_tilde = np.clip(np.asarray(action, dtype=float) + p_a, bounds[:, 0], bounds[:, 1])
    rec = PerturbRecord(None, obs, d_hat, logprob)
    return s_tilde, p_s, action, action_logprob, a_tilde, p_a, rec


def random_step(att: AdversaryAttachment, state_or_action: np.ndarray, contexts,
                budget: PerturbationBudget, rng: np.random.Generator):
    key = "action" if budget.domain is AttackDomain.ACTION else "state"
    ctx = contexts[key]
    target = np.asarray(state_or_action, dtype=float)
    p = random_adversary(budget, ctx, rng, dim=target.shape[0])
    ctx.update(p)
    return target + p, PerturbRecord(p, None, None, None)


def opponent_step(att: AdversaryAttachment, obs: np.ndarray,
                  rng: np.random.Generator, mode: str = "sample"):
    action, logprob = att.director.act(obs, mode=mode, rng=rng)
    return int(action), PerturbRecord(None, np.asarray(obs, dtype=float), int(action),
                                      float(logprob))


# -- spec-level convenience wrappers ------------------------------------------


def paad_perturb_state(att: AdversaryAttachment, state: np.ndarray,
                       ctx: CouplingContext, rng: np.random.Generator,
                       mode: str = "sample") -> np.ndarray:
    """Perturbed state from one PA-AD step (context updated in place)."""
    s_tilde, _ = paad_step(att, state, {"state": ctx}, att.budget, rng, mode=mode)
    return s_tilde


def acad_perturb_action(att: AdversaryAttachment, state: np.ndarray, action,
                        ctx: CouplingContext, rng: np.random.Generator,
                        bounds: np.ndarray, mode: str = "sample") -> np.ndarray:
    """Perturbed action from one AC-AD step (context updated in place)."""
    a_tilde, _ = acad_step(att, state, action, {"action": ctx}, att.budget, rng,
                           np.asarray(bounds, dtype=float), mode=mode)
    return a_tilde


def mixed_perturb(att: AdversaryAttachment, state: np.ndarray, act_callback,
                  ctx_state: CouplingContext, ctx_action: CouplingContext,
                  rng: np.random.Generator, bounds: np.ndarray, mode: str = "sample"):
    """(s_tilde, a_tilde) from one mixed-adversary step."""
    out = mixed_step(att, state, act_callback, {"state": ctx_state, "action": ctx_action},
                     att.state_budget, att.action_budget, rng,
                     np.asarray(bounds, dtype=float), mode=mode)
    s_tilde, _, _, _, a_tilde, _, _ = out
    return s_tilde, a_tilde
