"""Outer training loop: dual population growth, payoff completion, meta-Nash
recomputation, budget warmup, checkpointing, and termination.

Each epoch freezes the previous meta-strategies, trains one best response per
side (RL oracle, or exact enumeration on matrix games), appends both to the
populations, fills the missing payoff cells, and re-solves the restricted
game. Budgets warm up linearly from zero over the first half of the epochs.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .adversaries import (
    AdversaryAttachment,
    AdversaryKind,
    make_opponent,
)
from .envs import Environment, MatrixGameEnv
from .meta_game import (
    MetaStrategy,
    PayoffMatrix,
    RestrictedGameSolution,
    estimate_payoff_entry,
    exact_exploitability,
    solve_zero_sum,
)
from .oracle import OracleConfig, train_best_response
from .perturb import PerturbationBudget
from .policy import (
    CheckpointError,
    Policy,
    make_pure_discrete_policy,
    policy_from_dict,
    policy_to_dict,
)

STATE_FORMAT_VERSION = 1


class EngineError(RuntimeError):
    """Epoch aborted; the caller's state is unchanged."""


@dataclass(frozen=True)
class BudgetSchedule:
    """Linear warmup of (epsilon, epsilon_bar) from zero to their targets."""

    target: PerturbationBudget | None
    action_target: PerturbationBudget | None = None  # mixed adversaries only
    warmup_fraction: float = 0.5
    total_epochs: int = 30

    def fraction(self, epoch: int) -> float:
        if self.warmup_fraction <= 0.0 or self.total_epochs <= 0:
            return 1.0
        progress = epoch / self.total_epochs
        return min(1.0, progress / self.warmup_fraction)

    def active(self, epoch: int):
        if self.target is None:
            return None
        f = self.fraction(epoch)
        state = self.target.scaled(f)
        if self.action_target is not None:
            return (state, self.action_target.scaled(f))
        return state

    def to_dict(self) -> dict:
        return {
            "target": None if self.target is None else self.target.to_config(),
            "action_target": (None if self.action_target is None
                              else self.action_target.to_config()),
            "warmup_fraction": self.warmup_fraction,
            "total_epochs": self.total_epochs,
        }

    @staticmethod
    def from_dict(d: dict) -> "BudgetSchedule":
        return BudgetSchedule(
            target=(None if d["target"] is None
                    else PerturbationBudget.from_config(d["target"])),
            action_target=(None if d.get("action_target") is None
                           else PerturbationBudget.from_config(d["action_target"])),
            warmup_fraction=float(d["warmup_fraction"]),
            total_epochs=int(d["total_epochs"]),
        )


@dataclass(frozen=True)
class EngineConfig:
    epochs: int = 30
    threshold: float | None = None  # None: derived (payoff range / epoch-0 returns)
    warmup_fraction: float = 0.5
    payoff_episodes: int = 20
    oracle_mode: str = "rl"  # "rl" | "exact" (matrix games only)
    attacker_kind: str = "paad"
    solver_tol: float = 1e-8
    seed: int = 0
    budget: PerturbationBudget | None = None
    action_budget: PerturbationBudget | None = None

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "threshold": self.threshold,
            "warmup_fraction": self.warmup_fraction,
            "payoff_episodes": self.payoff_episodes,
            "oracle_mode": self.oracle_mode,
            "attacker_kind": self.attacker_kind,
            "solver_tol": self.solver_tol,
            "seed": self.seed,
            "budget": None if self.budget is None else self.budget.to_config(),
            "action_budget": (None if self.action_budget is None
                              else self.action_budget.to_config()),
        }

    @staticmethod
    def from_dict(d: dict) -> "EngineConfig":
        d = dict(d)
        if d.get("budget") is not None:
            d["budget"] = PerturbationBudget.from_config(d["budget"])
        if d.get("action_budget") is not None:
            d["action_budget"] = PerturbationBudget.from_config(d["action_budget"])
        return EngineConfig(**d)


@dataclass
class GradState:
    epoch: int
    agent_pop: list
    adv_pop: list
    payoff: PayoffMatrix
    sigma_a: MetaStrategy
    sigma_v: MetaStrategy
    schedule: BudgetSchedule
    rng: np.random.Generator
    config: EngineConfig
    exploit_history: list = field(default_factory=list)
    threshold: float | None = None
    refreshed_at_full: bool = False
    agent_pure: list = field(default_factory=list)  # matrix-exact mode only
    adv_pure: list = field(default_factory=list)

    @property
    def exact_mode(self) -> bool:
        return self.config.oracle_mode == "exact"


def init_grad_state(env: Environment, config: EngineConfig,
                    rng: np.random.Generator | None = None) -> GradState:
    """Initial one-policy populations plus the first restricted solve."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x6AD]))
    schedule = BudgetSchedule(target=config.budget, action_target=config.action_budget,
                              warmup_fraction=config.warmup_fraction,
                              total_epochs=config.epochs)
    payoff = PayoffMatrix(min_count=1 if config.oracle_mode == "exact"
                          else config.payoff_episodes)
    if isinstance(env, MatrixGameEnv) and config.oracle_mode == "exact":
        k = env.payoff.shape[0]
        # same draw order as double_oracle_matrix so traces line up exactly
        do_rng = np.random.default_rng(config.seed)
        i0 = int(do_rng.integers(k))
        j0 = int(do_rng.integers(k))
        agent_pop = [make_pure_discrete_policy(k, i0)]
        adv_pop = [make_opponent(make_pure_discrete_policy(k, j0))]
        agent_pure, adv_pure = [i0], [j0]
    elif config.oracle_mode == "exact":
        raise EngineError("exact oracle mode requires a matrix game environment")
    else:
        oracle_seed = np.random.SeedSequence([config.seed, 0x1111])
        init_rngs = [np.random.default_rng(c) for c in oracle_seed.spawn(2)]
        agent_pop = [_fresh_agent(env, init_rngs[0])]
        adv_pop = [_fresh_adversary(env, config, init_rngs[1])]
        agent_pure, adv_pure = [], []
    state = GradState(
        epoch=0, agent_pop=agent_pop, adv_pop=adv_pop, payoff=payoff,
        sigma_a=MetaStrategy(np.array([1.0])), sigma_v=MetaStrategy(np.array([1.0])),
        schedule=schedule, rng=rng, config=config, threshold=config.threshold,
        agent_pure=agent_pure, adv_pure=adv_pure,
    )
    state.payoff.add_row()
    state.payoff.add_col()
    _complete_payoff(state, env)
    _resolve_meta(state)
    if state.threshold is None and isinstance(env, MatrixGameEnv):
        rng_range = float(np.max(env.payoff) - np.min(env.payoff))
        state.threshold = max(0.05 * rng_range, 10 * config.solver_tol)
    return state


def _fresh_agent(env: Environment, rng: np.random.Generator) -> Policy:
    from .policy import ArchSpec

    spec = env.spec
    if spec.action_kind == "discrete-finite":
        return Policy(ArchSpec(spec.state_dim, spec.action_dim, head="categorical"),
                      rng=rng)
    return Policy(ArchSpec(spec.state_dim, spec.action_dim, head="gaussian"),
                  action_bounds=spec.action_bounds, rng=rng)


def _fresh_adversary(env: Environment, config: EngineConfig,
                     rng: np.random.Generator) -> AdversaryAttachment:
    from .adversaries import director_arch_for

    spec = env.spec
    if env.two_player:
        from .policy import ArchSpec

        return make_opponent(Policy(ArchSpec(spec.state_dim, spec.action_dim,
                                             head="categorical"), rng=rng))
    kind = AdversaryKind(config.attacker_kind)
    if kind is AdversaryKind.RANDOM:
        from .adversaries import make_random

        return make_random(config.budget)
    director = Policy(director_arch_for(kind, spec.state_dim, spec.action_dim),
                      rng=rng)
    if kind is AdversaryKind.MIXED:
        return AdversaryAttachment(kind, director=director,
                                   state_budget=config.budget,
                                   action_budget=config.action_budget)
    return AdversaryAttachment(kind, director=director, budget=config.budget)


def _meta_value(state: GradState, env: Environment, adversary, budget,
                seed: int, episodes: int = 20) -> float:
    """Agent-side mean return of sigma_a-sampled agents against one adversary."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(episodes):
        agent = state.agent_pop[state.sigma_a.sample(rng)]
        mean, _ = estimate_payoff_entry(agent, adversary, env, 1, rng, budget=budget)
        total += mean
    return total / episodes


def _complete_payoff(state: GradState, env: Environment) -> None:
    active = state.schedule.active(state.epoch)
    n_episodes = (1 if state.exact_mode else state.config.payoff_episodes)
    for (i, j) in sorted(state.payoff.missing()):
        mean, stderr = estimate_payoff_entry(
            state.agent_pop[i], state.adv_pop[j], env, n_episodes, state.rng,
            budget=active)
        state.payoff.set_entry(i, j, mean, stderr, n_episodes)


def _resolve_meta(state: GradState) -> RestrictedGameSolution:
    sol = solve_zero_sum(state.payoff.as_array(), tol=state.config.solver_tol)
    state.sigma_a = sol.sigma_row
    state.sigma_v = sol.sigma_col
    return sol


def _exact_best_responses(state: GradState, env: MatrixGameEnv):
    u = env.payoff
    cols = np.array(state.adv_pure, dtype=int)
    rows = np.array(state.agent_pure, dtype=int)
    row_payoffs = u[:, cols] @ state.sigma_v.probs
    col_payoffs = state.sigma_a.probs @ u[rows, :]
    br_row = int(np.argmax(row_payoffs))
    br_col = int(np.argmin(col_payoffs))
    value_a = float(row_payoffs[br_row])
    value_v = float(-col_payoffs[br_col])
    agent = make_pure_discrete_policy(u.shape[0], br_row)
    adversary = make_opponent(make_pure_discrete_policy(u.shape[0], br_col))
    return (agent, br_row, value_a), (adversary, br_col, value_v)


def grad_epoch(state: GradState, env: Environment, oracle_config: OracleConfig,
               rng: np.random.Generator | None = None) -> GradState:
    """One population-growth epoch; returns the advanced state.

    On oracle failure the input state is left unchanged and the error
    propagates.
    """
    rng = rng if rng is not None else state.rng
    active = state.schedule.active(state.epoch)
    if isinstance(active, tuple):
        state_budget, action_budget = active
    else:
        state_budget, action_budget = active, None

    if state.exact_mode:
        # mirror double_oracle_matrix exactly: a pure best response already in
        # the population is not re-added, so traces stay comparable
        (new_agent, br_row, value_a), (new_adv, br_col, value_v) = \
            _exact_best_responses(state, env)
        if br_row not in state.agent_pure:
            state.agent_pure.append(br_row)
            state.agent_pop.append(new_agent)
            state.payoff.add_row()
        if br_col not in state.adv_pure:
            state.adv_pure.append(br_col)
            state.adv_pop.append(new_adv)
            state.payoff.add_col()
    else:
        rng_snapshot = rng.bit_generator.state
        try:
            seed_a = int(rng.integers(2 ** 63))
            seed_v = int(rng.integers(2 ** 63))
            res_a = train_best_response(
                "agent", state.adv_pop, state.sigma_v, env, active, oracle_config,
                seed=seed_a)
            new_agent, value_a = res_a.policy, res_a.value
            if not env.two_player and \
                    AdversaryKind(state.config.attacker_kind) is AdversaryKind.RANDOM:
                # the baseline attacker has nothing to train; estimate its value
                from .adversaries import make_random

                new_adv = make_random(state.config.budget)
                value_v = -_meta_value(state, env, new_adv, active, seed_v)
            else:
                res_v = train_best_response(
                    "adversary", state.agent_pop, state.sigma_a, env, active,
                    oracle_config, seed=seed_v,
                    attacker_kind=state.config.attacker_kind)
                new_adv, value_v = res_v.attachment, res_v.value
        except Exception:
            rng.bit_generator.state = rng_snapshot  # a retried epoch replays
            raise
        state.agent_pop.append(new_agent)
        state.adv_pop.append(new_adv)
        state.payoff.add_row()
        state.payoff.add_col()

    state.epoch += 1
    if state.schedule.fraction(state.epoch) >= 1.0 and not state.refreshed_at_full \
            and state.schedule.target is not None:
        # the schedule changed the game while entries accumulated; re-estimate
        state.payoff = PayoffMatrix(min_count=state.payoff.min_count)
        for _ in state.agent_pop:
            state.payoff.add_row()
        for _ in state.adv_pop:
            state.payoff.add_col()
        state.refreshed_at_full = True
    _complete_payoff(state, env)
    _resolve_meta(state)
    state.exploit_history.append(float(value_a + value_v))
    return state


@dataclass
class RunReport:
    converged: bool
    epochs_run: int
    threshold: float | None
    exploit_history: list
    run_dir: str | None


def run_grad(config: EngineConfig, env_factory, rng=None,
             oracle_config: OracleConfig | None = None,
             out_dir: str | None = None):
    """Run epochs until the exploitability estimate meets the threshold.

    Returns (sigma_a, sigma_v, state, report); hitting the epoch limit without
    convergence is reported, not raised.
    """
    oracle_config = oracle_config or OracleConfig()
    env = env_factory(config.seed) if callable(env_factory) else env_factory
    state = init_grad_state(env, config, rng=rng)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        events = os.path.join(out_dir, "events.jsonl")
        if os.path.exists(events):
            os.remove(events)
    converged = False
    for _ in range(config.epochs):
        state = grad_epoch(state, env, oracle_config)
        if state.threshold is None:
            state.threshold = _auto_threshold(state)
        _emit_epoch_artifacts(state, out_dir)
        if state.threshold is not None and state.exploit_history[-1] <= state.threshold:
            converged = True
            break
    report = RunReport(converged=converged, epochs_run=state.epoch,
                       threshold=state.threshold,
                       exploit_history=list(state.exploit_history),
                       run_dir=out_dir)
    return state.sigma_a, state.sigma_v, state, report


def _auto_threshold(state: GradState) -> float | None:
    # scale-free criterion: 5% of (epoch-0 trained return - untrained return),
    # measurable because epoch 0 trains at epsilon = 0
    if state.epoch < 1 or state.exact_mode:
        return state.threshold
    return None if not state.exploit_history else max(
        0.05 * abs(state.exploit_history[0]), 1e-6)


def _emit_epoch_artifacts(state: GradState, out_dir: str | None) -> None:
    if not out_dir:
        return
    save_state(state, os.path.join(out_dir, f"state-epoch-{state.epoch}.ckpt"))
    state.payoff.write_csv(os.path.join(out_dir, "payoff.csv"))
    with open(os.path.join(out_dir, "exploitability.csv"), "w") as fh:
        fh.write("epoch,exploitability\n")
        for i, e in enumerate(state.exploit_history, start=1):
            fh.write(f"{i},{e!r}\n")
    event = {
        "event": "epoch",
        "epoch": state.epoch,
        "populations": [len(state.agent_pop), len(state.adv_pop)],
        "exploitability": state.exploit_history[-1],
        "threshold": state.threshold,
    }
    with open(os.path.join(out_dir, "events.jsonl"), "a") as fh:
        fh.write(json.dumps(event, sort_keys=True) + "\n")


def matrix_effective_strategies(state: GradState, env: MatrixGameEnv):
    """Mixed strategies over pure rows/columns induced by the meta pair."""
    obs = np.zeros(1)
    k = env.payoff.shape[0]
    x = np.zeros(k)
    for w, pol in zip(state.sigma_a.probs, state.agent_pop):
        logits = pol.dist_params(obs)[0]
        z = np.exp(logits - logits.max())
        x += w * z / z.sum()
    y = np.zeros(k)
    for w, att in zip(state.sigma_v.probs, state.adv_pop):
        logits = att.director.dist_params(obs)[0]
        z = np.exp(logits - logits.max())
        y += w * z / z.sum()
    return x / x.sum(), y / y.sum()


def matrix_exact_exploitability(state: GradState, env: MatrixGameEnv) -> float:
    x, y = matrix_effective_strategies(state, env)
    return exact_exploitability(env.payoff, MetaStrategy(x), MetaStrategy(y))


# -- checkpointing -------------------------------------------------------------


def _attachment_to_dict(att: AdversaryAttachment) -> dict:
    return {
        "kind": att.kind.value,
        "director": None if att.director is None else policy_to_dict(att.director),
        "budget": None if att.budget is None else att.budget.to_config(),
        "state_budget": (None if att.state_budget is None
                         else att.state_budget.to_config()),
        "action_budget": (None if att.action_budget is None
                          else att.action_budget.to_config()),
        "memory_window": att.memory_window,
    }


def _attachment_from_dict(d: dict) -> AdversaryAttachment:
    return AdversaryAttachment(
        kind=AdversaryKind(d["kind"]),
        director=None if d["director"] is None else policy_from_dict(d["director"]),
        budget=(None if d["budget"] is None
                else PerturbationBudget.from_config(d["budget"])),
        state_budget=(None if d["state_budget"] is None
                      else PerturbationBudget.from_config(d["state_budget"])),
        action_budget=(None if d["action_budget"] is None
                       else PerturbationBudget.from_config(d["action_budget"])),
        memory_window=int(d["memory_window"]),
    )


def save_state(state: GradState, path: str) -> None:
    payload = {
        "format_version": STATE_FORMAT_VERSION,
        "epoch": state.epoch,
        "agent_pop": [policy_to_dict(p) for p in state.agent_pop],
        "adv_pop": [_attachment_to_dict(a) for a in state.adv_pop],
        "payoff": state.payoff.to_dict(),
        "sigma_a": state.sigma_a.probs.tolist(),
        "sigma_v": state.sigma_v.probs.tolist(),
        "schedule": state.schedule.to_dict(),
        "rng_state": state.rng.bit_generator.state,
        "config": state.config.to_dict(),
        "exploit_history": state.exploit_history,
        "threshold": state.threshold,
        "refreshed_at_full": state.refreshed_at_full,
        "agent_pure": state.agent_pure,
        "adv_pure": state.adv_pure,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
    os.replace(tmp, path)


def load_state(path: str) -> GradState:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != STATE_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {payload.get('format_version')!r} "
            f"unsupported (expected {STATE_FORMAT_VERSION})"
        )
    required = {"epoch", "agent_pop", "adv_pop", "payoff", "sigma_a", "sigma_v",
                "schedule", "rng_state", "config"}
    missing = required - payload.keys()
    if missing:
        raise CheckpointError(f"checkpoint {path} is missing fields {sorted(missing)}")
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    state = GradState(
        epoch=int(payload["epoch"]),
        agent_pop=[policy_from_dict(d) for d in payload["agent_pop"]],
        adv_pop=[_attachment_from_dict(d) for d in payload["adv_pop"]],
        payoff=PayoffMatrix.from_dict(payload["payoff"]),
        sigma_a=MetaStrategy(np.asarray(payload["sigma_a"], dtype=float)),
        sigma_v=MetaStrategy(np.asarray(payload["sigma_v"], dtype=float)),
        schedule=BudgetSchedule.from_dict(payload["schedule"]),
        rng=rng,
        config=EngineConfig.from_dict(payload["config"]),
        exploit_history=list(payload.get("exploit_history", [])),
        threshold=payload.get("threshold"),
        refreshed_at_full=bool(payload.get("refreshed_at_full", False)),
        agent_pure=list(payload.get("agent_pure", [])),
        adv_pure=list(payload.get("adv_pure", [])),
    )
    return state


def checkpoint_io(state, path: str, direction: str):
    """Save or load a GradState; load(save(state)) reproduces the next epoch."""
    if direction == "save":
        save_state(state, path)
        return None
    if direction == "load":
        return load_state(path)
    raise ValueError("direction must be 'save' or 'load'")
