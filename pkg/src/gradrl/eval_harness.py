"""Evaluation protocol: train attackers from scratch against frozen agents,
report natural vs. attacked returns with seed aggregation, and run the
epsilon-bar and model-uncertainty sweeps.

Evaluation cells derive per-episode rng streams from (master seed, stream
tag, episode index), so cells that cannot perturb (epsilon = 0, alpha = 0)
reproduce the natural-evaluation trajectories bitwise. Frozen victims play
mean mode (the deployed deterministic policy) both while attackers train
against them and inside evaluation cells.
"""
from __future__ import annotations

import csv
import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adversaries import (
    AdversaryAttachment,
    AdversaryKind,
    make_model_uncertainty,
)
from .envs import Environment
from .oracle import OracleConfig, train_best_response
from .perturb import AttackDomain, PerturbationBudget
from .policy import Policy, params_fingerprint
from .rollout import rollout

EVAL_STREAM = "eval-episode"


class ProtocolError(RuntimeError):
    """Evaluation protocol invariant broken (e.g. the frozen agent moved)."""


def episode_seed(master_seed: int, tag: str, index: int) -> np.random.SeedSequence:
    """Deterministic per-episode stream shared by all cells of one seed."""
    return np.random.SeedSequence([int(master_seed), zlib.crc32(tag.encode()), index])


def evaluate_return(agent: Policy, env: Environment,
                    adversary: AdversaryAttachment | None = None,
                    budget=None, n_episodes: int = 100, seed: int = 0,
                    mode: str = "mean", adversary_mode: str = "mean",
                    tag: str = EVAL_STREAM) -> np.ndarray:
    """Per-episode returns over the shared seeded episode streams."""
    returns = np.empty(n_episodes)
    for k in range(n_episodes):
        traj = rollout(env, agent, adversary=adversary, budget=budget,
                       seed=episode_seed(seed, tag, k), agent_mode=mode,
                       adversary_mode=adversary_mode)
        returns[k] = traj.episode_return
    return returns


def natural_eval(agent: Policy, env: Environment, n_episodes: int = 100,
                 seeds=(0, 1, 2, 3, 4), mode: str = "mean") -> dict:
    """Mean/median/std of unattacked returns, per seed and pooled."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    per_seed = {}
    for s in seeds:
        r = evaluate_return(agent, env, n_episodes=n_episodes, seed=s, mode=mode)
        per_seed[int(s)] = {
            "mean": float(np.mean(r)),
            "median": float(np.median(r)),
            "std": float(np.std(r)),
            "episodes": n_episodes,
        }
    means = [v["mean"] for v in per_seed.values()]
    return {
        "per_seed": per_seed,
        "mean": float(np.mean(means)),
        "median": float(np.median(means)),
        "std": float(np.std(means)),
    }


@dataclass
class AttackResult:
    attachment: AdversaryAttachment
    attacked_return: float
    attacked_std: float
    restart_returns: list
    natural_return: float | None = None


def attack_from_scratch(frozen_agent: Policy, attacker_kind, budget,
                        env: Environment, oracle_config: OracleConfig,
                        seed: int = 0, n_episodes: int = 100, restarts: int = 1,
                        victim_mode: str = "mean") -> AttackResult:
    """Train a fresh adversary against one frozen agent and measure its bite.

    With multiple restarts, the reported cell is the minimum agent return
    (strongest trained attacker). The agent's parameter fingerprint must be
    identical before and after.
    """
    fingerprint = params_fingerprint(frozen_agent)
    if frozen_agent.obs_norm is not None:
        frozen_agent.obs_norm.frozen = True
    kind = AdversaryKind(attacker_kind)
    best = None
    restart_returns = []
    for r in range(restarts):
        res = train_best_response(
            "adversary", [frozen_agent], np.array([1.0]), env, budget,
            oracle_config, seed=seed * 1000003 + r,
            attacker_kind=kind, opponent_mode=victim_mode)
        returns = evaluate_return(frozen_agent, env, adversary=res.attachment,
                                  budget=budget, n_episodes=n_episodes, seed=seed,
                                  mode=victim_mode, adversary_mode="mean")
        mean_r = float(np.mean(returns))
        restart_returns.append(mean_r)
        if best is None or mean_r < best[0]:
            best = (mean_r, float(np.std(returns)), res.attachment)
    if params_fingerprint(frozen_agent) != fingerprint:
        raise ProtocolError("frozen agent parameters changed during the attack")
    attacked, std, attachment = best
    return AttackResult(attachment=attachment, attacked_return=attacked,
                        attacked_std=std, restart_returns=restart_returns)


@dataclass
class EvalCell:
    kind: str
    epsilon: float | None
    epsilon_bar: float | None
    alpha: float | None
    seed: int
    episodes: int
    mean_return: float | None
    std_return: float | None
    status: str = "ok"

    def row(self) -> list:
        fmt = lambda x: "" if x is None else repr(float(x))
        return [self.kind, fmt(self.epsilon), fmt(self.epsilon_bar), fmt(self.alpha),
                self.seed, self.episodes, fmt(self.mean_return),
                fmt(self.std_return), self.status]


@dataclass
class EvalReport:
    cells: list = field(default_factory=list)

    HEADER = ["kind", "epsilon", "epsilon_bar", "alpha", "seed", "episodes",
              "mean_return", "std_return", "status"]

    def add(self, cell: EvalCell) -> None:
        self.cells.append(cell)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.HEADER)
            for cell in self.cells:
                writer.writerow(cell.row())

    def summary(self) -> dict:
        groups: dict = {}
        for c in self.cells:
            if c.status != "ok":
                continue
            key = (c.kind, c.epsilon, c.epsilon_bar, c.alpha)
            groups.setdefault(key, []).append(c.mean_return)
        out = []
        for (kind, eps, ebar, alpha), vals in sorted(
                groups.items(), key=lambda kv: str(kv[0])):
            out.append({
                "kind": kind, "epsilon": eps, "epsilon_bar": ebar, "alpha": alpha,
                "median": float(np.median(vals)), "mean": float(np.mean(vals)),
                "std": float(np.std(vals)), "seeds": len(vals),
            })
        return {"cells": out}

    def write_summary(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, sort_keys=True, indent=1)


def _attack_cell(args):
    (agent, kind, budget, env, oracle_config, seed, episodes, restarts) = args
    try:
        res = attack_from_scratch(agent, kind, budget, env, oracle_config,
                                  seed=seed, n_episodes=episodes, restarts=restarts)
        return seed, res.attacked_return, res.attacked_std, "ok"
    except Exception as exc:  # cell marked failed, grid continues
        return seed, None, None, f"failed: {type(exc).__name__}"


def attack_grid(agent: Policy, env: Environment, attacker_kind, budgets: list,
                oracle_config: OracleConfig, seeds, episodes: int = 100,
                restarts: int = 1, workers: int = 1) -> EvalReport:
    """One attacked-return cell per (budget, seed), optionally in parallel."""
    report = EvalReport()
    jobs = []
    for budget in budgets:
        for s in seeds:
            jobs.append((budget, int(s),
                         (agent, attacker_kind, budget, env, oracle_config,
                          int(s), episodes, restarts)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_attack_cell, [j[2] for j in jobs]))
    else:
        results = [_attack_cell(j[2]) for j in jobs]
    for (budget, s, _), (seed, mean_r, std_r, status) in zip(jobs, results):
        report.add(EvalCell(kind=str(attacker_kind), epsilon=budget.epsilon,
                            epsilon_bar=budget.epsilon_bar, alpha=None, seed=seed,
                            episodes=episodes, mean_return=mean_r,
                            std_return=std_r, status=status))
    return report


def epsilon_bar_ablation(agent: Policy, env: Environment, epsilon: float,
                         epsilon_bar_grid, oracle_config: OracleConfig,
                         seeds=(0, 1, 2), attacker_kind="paad",
                         episodes: int = 100, restarts: int = 1,
                         norm: str = "linf", workers: int = 1) -> EvalReport:
    """Attacked returns across the coupling-bound grid at fixed epsilon.

    The grid should include a value >= 2 * epsilon, where the coupled
    attacker provably degenerates to the plain epsilon-ball attacker.
    """
    grid = sorted(float(e) for e in epsilon_bar_grid)
    if not grid:
        raise ValueError("epsilon_bar grid must be nonempty")
    if max(grid) < 2.0 * epsilon:
        raise ValueError("grid must include a decoupled cell (>= 2 * epsilon)")
    budgets = [PerturbationBudget(epsilon, ebar, norm=norm,
                                  domain=AttackDomain.STATE) for ebar in grid]
    return attack_grid(agent, env, attacker_kind, budgets, oracle_config, seeds,
                       episodes=episodes, restarts=restarts, workers=workers)


def model_uncertainty_sweep(agent: Policy, env: Environment, alpha_grid,
                            n_episodes: int = 100, seeds=(0, 1, 2, 3, 4)) -> EvalReport:
    """Mean return per alpha under random action replacement (no training)."""
    report = EvalReport()
    for alpha in alpha_grid:
        att = make_model_uncertainty(float(alpha))
        for s in seeds:
            returns = evaluate_return(agent, env, adversary=att, budget=att.budget,
                                      n_episodes=n_episodes, seed=int(s))
            report.add(EvalCell(kind="model_uncertainty", epsilon=None,
                                epsilon_bar=None, alpha=float(alpha), seed=int(s),
                                episodes=n_episodes,
                                mean_return=float(np.mean(returns)),
                                std_return=float(np.std(returns))))
    return report


def pooled_stderr(std_a: float, n_a: int, std_b: float, n_b: int) -> float:
    return math.sqrt(std_a ** 2 / max(n_a, 1) + std_b ** 2 / max(n_b, 1))
