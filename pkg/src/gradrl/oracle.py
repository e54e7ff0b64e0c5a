"""Approximate best-response training: clipped-surrogate policy gradient with
GAE advantages, driven entirely by the hand-written backward pass.

The learner is either the agent (maximizing environment reward against a
frozen adversary meta-strategy) or an adversary director (maximizing the
negated reward against a frozen agent meta-strategy). One frozen opponent is
drawn from the meta-strategy at each episode start.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .adversaries import (
    AdversaryAttachment,
    AdversaryKind,
    director_arch_for,
    make_opponent,
)
from .envs import Environment
from .meta_game import MetaStrategy
from .policy import ArchSpec, Policy, RunningNorm, ValueFunction
from .rollout import Trajectory, rollout


class OracleError(RuntimeError):
    """Training aborted (non-finite loss or diagnostic failure)."""


class DivergenceError(OracleError):
    """Mean return stayed below the configured floor for too long."""


@dataclass(frozen=True)
class OracleConfig:
    steps_per_iteration: int = 2048
    minibatch_size: int = 256
    epochs: int = 10
    clip_ratio: float = 0.2
    gae_lambda: float = 0.95
    discount: float = 0.99
    learning_rate: float = 3e-4
    value_learning_rate: float | None = None  # None: same as learning_rate
    entropy_coef: float | None = None  # None: 0.0 continuous, 0.01 discrete
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    target_kl: float = 0.03
    iterations: int = 50
    hidden: tuple = (64, 64)
    normalize_obs: bool = True
    normalize_rewards: bool = True
    normalize_advantages: bool = True
    divergence_margin: float | None = None
    divergence_patience: int = 10

    def __post_init__(self):
        if not (0.0 < self.clip_ratio < 1.0):
            raise ValueError("clip_ratio must lie in (0, 1)")
        if not (0.0 < self.gae_lambda <= 1.0) or not (0.0 < self.discount <= 1.0):
            raise ValueError("gae_lambda and discount must lie in (0, 1]")
        for name in ("steps_per_iteration", "minibatch_size", "epochs", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.value_coef < 0 or self.max_grad_norm <= 0:
            raise ValueError("learning_rate/value_coef/max_grad_norm out of range")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def resolved_entropy_coef(self, head: str) -> float:
        if self.entropy_coef is not None:
            return self.entropy_coef
        return 0.01 if head == "categorical" else 0.0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["hidden"] = list(self.hidden)
        return d

    @staticmethod
    def from_dict(d: dict) -> "OracleConfig":
        return OracleConfig(**{k: (tuple(v) if k == "hidden" else v)
                               for k, v in d.items()})


def gae_advantages(rewards: np.ndarray, values: np.ndarray, gamma: float,
                   lam: float) -> np.ndarray:
    """Generalized advantage estimates with terminal bootstrap zero."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.size == 0:
        raise ValueError("gae_advantages requires a nonempty trajectory")
    adv = np.empty_like(rewards)
    running = 0.0
    next_value = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv


def trajectory_advantages(traj: Trajectory, value_fn: ValueFunction, gamma: float,
                          lam: float, view: str = "agent") -> np.ndarray:
    """GAE over a trajectory in the requested side's reward convention."""
    if view == "agent":
        obs, rewards = traj.perturbed_states, traj.rewards
    else:
        obs, rewards = traj.adv_observations, traj.adv_rewards
    values, _ = value_fn.value(obs)
    return gae_advantages(rewards, values, gamma, lam)


class Adam:
    """Plain Adam on a flat parameter vector."""

    def __init__(self, dim: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if norm > max_norm and norm > 0.0:
        return grad * (max_norm / norm)
    return grad


def ppo_loss_and_grads(policy: Policy, value_fn: ValueFunction, batch: dict,
                       config: OracleConfig):
    """Clipped-surrogate loss, its manual gradients, and update statistics.

    ``batch`` holds normalized observations, actions, old log-probabilities,
    (normalized) advantages and value targets. Gradients are of
    L = -E[min(rho A, clip(rho) A)] + c_v E[(V - target)^2] - c_e E[H].
    """
    obs = batch["obs"]
    n = len(obs)
    lp, cache = policy.logprob(obs, batch["actions"], normalized=True)
    ratio = np.exp(lp - batch["old_logprobs"])
    adv = batch["advantages"]
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - config.clip_ratio, 1.0 + config.clip_ratio) * adv
    surrogate = np.minimum(unclipped, clipped)
    policy_loss = -float(np.mean(surrogate))
    active = (unclipped <= clipped).astype(float)
    dlp = -(active * ratio * adv) / n
    grad_policy = policy.logprob_backward(cache, dlp)

    ent_coef = config.resolved_entropy_coef(policy.arch.head)
    ent, ent_cache = policy.entropy(obs, normalized=True)
    entropy = float(np.mean(ent))
    if ent_coef != 0.0:
        grad_policy += policy.entropy_backward(ent_cache, np.full(n, -ent_coef / n))

    values, v_cache = value_fn.value(obs)
    v_err = values - batch["value_targets"]
    value_loss = float(np.mean(v_err ** 2))
    grad_value = value_fn.value_backward(v_cache, 2.0 * config.value_coef * v_err / n)

    approx_kl = float(np.mean(batch["old_logprobs"] - lp))
    total = policy_loss + config.value_coef * value_loss - ent_coef * entropy
    stats = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "approx_kl": approx_kl,
        "total_loss": total,
        "clip_fraction": float(np.mean(active < 0.5)),
    }
    return stats, grad_policy, grad_value


def clipped_surrogate_update(policy: Policy, value_fn: ValueFunction, batch: dict,
                             config: OracleConfig, policy_opt: Adam, value_opt: Adam,
                             rng: np.random.Generator):
    """One epoch of shuffled minibatch steps; reports a KL early stop."""
    n = len(batch["obs"])
    order = rng.permutation(n)
    kl = 0.0
    last_stats = None
    stopped = False
    for start in range(0, n, config.minibatch_size):
        idx = order[start:start + config.minibatch_size]
        mini = {k: batch[k][idx] for k in
                ("obs", "actions", "old_logprobs", "advantages", "value_targets")}
        for key in ("advantages", "value_targets", "old_logprobs"):
            if not np.all(np.isfinite(mini[key])):
                raise OracleError(f"non-finite {key} in the update batch")
        stats, g_pol, g_val = ppo_loss_and_grads(policy, value_fn, mini, config)
        if not math.isfinite(stats["total_loss"]):
            raise OracleError(
                f"non-finite loss {stats} on a minibatch of {len(idx)} steps"
            )
        policy.params = policy_opt.step(
            policy.params, clip_grad_norm(g_pol, config.max_grad_norm))
        value_fn.params = value_opt.step(
            value_fn.params, clip_grad_norm(g_val, config.max_grad_norm))
        kl = stats["approx_kl"]
        last_stats = stats
        if config.target_kl is not None and kl > config.target_kl:
            stopped = True
            break
    last_stats = last_stats or {}
    last_stats["kl_stop"] = stopped
    return last_stats


class RewardScaler:
    """Scale rewards by the running std of the discounted return."""

    def __init__(self, gamma: float, eps: float = 1e-8):
        self.gamma = gamma
        self.eps = eps
        self.count = 0.0
        self.mean = 0.0
        self.m2 = 0.0
        self.accum = 0.0

    def scale_episode(self, rewards: np.ndarray) -> np.ndarray:
        out = np.empty_like(rewards)
        for i in range(len(rewards)):
            self.accum = self.gamma * self.accum + float(rewards[i])
            self.count += 1.0
            delta = self.accum - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (self.accum - self.mean)
            var = self.m2 / self.count if self.count >= 2 else 1.0
            out[i] = rewards[i] / math.sqrt(var + self.eps)
        self.accum = 0.0
        return out


@dataclass
class BestResponseResult:
    policy: Policy
    value_fn: ValueFunction
    curve: list
    value: float
    attachment: AdversaryAttachment | None = None


def _build_learner(learner_side: str, env: Environment, budget, config: OracleConfig,
                   attacker_kind, rng: np.random.Generator):
    spec = env.spec
    if learner_side == "agent":
        if spec.action_kind == "discrete-finite":
            arch = ArchSpec(spec.state_dim, spec.action_dim, config.hidden,
                            head="categorical")
            policy = Policy(arch, rng=rng)
        else:
            arch = ArchSpec(spec.state_dim, spec.action_dim, config.hidden,
                            head="gaussian")
            policy = Policy(arch, action_bounds=spec.action_bounds, rng=rng)
        obs_dim = spec.state_dim
        return policy, obs_dim
    if env.two_player:
        arch = ArchSpec(spec.state_dim, spec.action_dim, config.hidden,
                        head="categorical")
        return Policy(arch, rng=rng), spec.state_dim
    kind = AdversaryKind(attacker_kind) if attacker_kind is not None else AdversaryKind.PAAD
    arch = director_arch_for(kind, spec.state_dim, spec.action_dim, config.hidden)
    return Policy(arch, rng=rng), arch.obs_dim


def _wrap_adversary(learner_side: str, policy: Policy, env: Environment, budget,
                    attacker_kind) -> AdversaryAttachment | None:
    if learner_side != "adversary":
        return None
    if env.two_player:
        return make_opponent(policy)
    kind = AdversaryKind(attacker_kind) if attacker_kind is not None else AdversaryKind.PAAD
    if kind is AdversaryKind.MIXED:
        state_b, action_b = budget
        return AdversaryAttachment(kind, director=policy, state_budget=state_b,
                                   action_budget=action_b)
    return AdversaryAttachment(kind, director=policy, budget=budget)


def train_best_response(learner_side: str, opponent_population, opponent_meta,
                        env: Environment, budget, config: OracleConfig,
                        seed: int = 0, attacker_kind=None,
                        opponent_mode: str = "sample") -> BestResponseResult:
    """Train an approximate best response against a frozen meta-strategy.

    ``opponent_population`` holds frozen Policies (when the adversary learns)
    or AdversaryAttachments / None entries (when the agent learns); one is
    drawn from ``opponent_meta`` at every episode start.
    """
    if learner_side not in ("agent", "adversary"):
        raise ValueError("learner_side must be 'agent' or 'adversary'")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBE57]))
    learner, obs_dim = _build_learner(learner_side, env, budget, config, attacker_kind, rng)
    if config.normalize_obs:
        learner.obs_norm = RunningNorm(obs_dim)
    value_fn = ValueFunction(obs_dim, config.hidden, rng=rng)
    policy_opt = Adam(learner.params.size, config.learning_rate)
    value_lr = (config.value_learning_rate if config.value_learning_rate is not None
                else config.learning_rate)
    value_opt = Adam(value_fn.params.size, value_lr)
    reward_scaler = RewardScaler(config.discount) if config.normalize_rewards else None
    attachment = _wrap_adversary(learner_side, learner, env, budget, attacker_kind)

    if opponent_population is None:
        opponent_population = [None]
        opponent_meta = MetaStrategy(np.array([1.0]))
    if not isinstance(opponent_meta, MetaStrategy):
        opponent_meta = MetaStrategy(np.asarray(opponent_meta, dtype=float))
    if len(opponent_meta.probs) != len(opponent_population):
        raise ValueError("meta-strategy does not match the opponent population")

    curve = []
    initial_return = None
    low_streak = 0
    for iteration in range(config.iterations):
        episodes, steps = [], 0
        while steps < config.steps_per_iteration:
            opp_idx = opponent_meta.sample(rng)
            opponent = opponent_population[opp_idx]
            ep_seed = int(rng.integers(2 ** 63))
            if learner_side == "agent":
                traj = rollout(env, learner, adversary=opponent, budget=budget,
                               seed=ep_seed, agent_mode="sample",
                               adversary_mode=opponent_mode)
                raw_obs, acts = traj.perturbed_states, traj.raw_actions
                rewards, old_lp = traj.rewards, traj.logprobs
                ep_return = traj.episode_return
            else:
                traj = rollout(env, opponent, adversary=attachment, budget=budget,
                               seed=ep_seed, agent_mode=opponent_mode,
                               adversary_mode="sample")
                raw_obs, acts = traj.adv_observations, traj.adv_actions
                rewards, old_lp = traj.adv_rewards, traj.adv_logprobs
                ep_return = -traj.episode_return
            episodes.append((raw_obs, acts, rewards, old_lp, ep_return))
            steps += traj.length

        batch_obs, batch_act, batch_adv, batch_tgt, batch_lp = [], [], [], [], []
        returns = []
        for raw_obs, acts, rewards, old_lp, ep_return in episodes:
            if learner.obs_norm is not None:
                # stats stay frozen for the whole iteration so stored
                # observations match the ones the policy acted on
                norm_obs = learner.obs_norm.normalize(raw_obs)
            else:
                norm_obs = np.asarray(raw_obs, dtype=float)
            train_rewards = (reward_scaler.scale_episode(rewards)
                             if reward_scaler is not None else rewards)
            values, _ = value_fn.value(norm_obs)
            adv = gae_advantages(train_rewards, values, config.discount,
                                 config.gae_lambda)
            batch_obs.append(norm_obs)
            batch_act.append(acts)
            batch_adv.append(adv)
            batch_tgt.append(adv + values)
            batch_lp.append(old_lp)
            returns.append(ep_return)
        batch = {
            "obs": np.concatenate(batch_obs),
            "actions": np.concatenate(batch_act),
            "advantages": np.concatenate(batch_adv),
            "value_targets": np.concatenate(batch_tgt),
            "old_logprobs": np.concatenate(batch_lp),
        }
        if learner.obs_norm is not None:
            for raw_obs, *_ in episodes:
                learner.obs_norm.update(raw_obs)
        if config.normalize_advantages:
            a = batch["advantages"]
            batch["advantages"] = (a - a.mean()) / (a.std() + 1e-8)

        stats = {}
        for _ in range(config.epochs):
            stats = clipped_surrogate_update(learner, value_fn, batch, config,
                                             policy_opt, value_opt, rng)
            if stats.get("kl_stop"):
                break

        mean_return = float(np.mean(returns))
        curve.append({
            "iteration": iteration,
            "steps": (iteration + 1) * config.steps_per_iteration,
            "mean_return": mean_return,
            "policy_loss": stats.get("policy_loss", float("nan")),
            "value_loss": stats.get("value_loss", float("nan")),
            "kl": stats.get("approx_kl", float("nan")),
            "entropy": stats.get("entropy", float("nan")),
        })
        if initial_return is None:
            initial_return = mean_return
        if config.divergence_margin is not None:
            if mean_return < initial_return - config.divergence_margin:
                low_streak += 1
                if low_streak >= config.divergence_patience:
                    raise DivergenceError(
                        f"mean return {mean_return:.4g} stayed below "
                        f"{initial_return:.4g} - {config.divergence_margin:.4g} for "
                        f"{low_streak} consecutive evaluations"
                    )
            else:
                low_streak = 0

    final_value = curve[-1]["mean_return"] if curve else float("nan")
    if learner.obs_norm is not None:
        learner.obs_norm.frozen = True
    return BestResponseResult(policy=learner, value_fn=value_fn, curve=curve,
                              value=final_value, attachment=attachment)


def write_curve_csv(curve: list, path: str) -> None:
    """Training curve as CSV (step, mean return, losses, KL, entropy)."""
    fields = ["iteration", "steps", "mean_return", "policy_loss", "value_loss",
              "kl", "entropy"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in curve:
            writer.writerow([repr(row[f]) if isinstance(row[f], float) else row[f]
                             for f in fields])
