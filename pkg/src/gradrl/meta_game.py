"""Empirical payoff matrices, restricted-game Nash solving, exploitability,
and the exact double-oracle loop for matrix games.

The zero-sum solver's primary route is an exact LP (value-maximization form,
scipy HiGHS); a pure-numpy regret-matching fallback removes the hard LP
dependency at the cost of looser practical tolerances. Payoff matrices store
the agent's payoff; the adversary's payoff is its negation everywhere.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

try:
    from scipy.optimize import linprog

    _HAVE_LINPROG = True
except ImportError:  # pragma: no cover - exercised only without scipy
    _HAVE_LINPROG = False


class SolverError(RuntimeError):
    """Zero-sum solve failed or did not converge."""


class MatrixError(ValueError):
    """Malformed payoff matrix input."""


@dataclass(frozen=True)
class MetaStrategy:
    """Mixed strategy over one side's population."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise MatrixError("meta-strategy must be a nonempty vector")
        if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
            raise MatrixError(f"meta-strategy must be a probability vector, got {p}")
        object.__setattr__(self, "probs", np.maximum(p, 0.0))

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.probs > 1e-9)

    def sample(self, rng: np.random.Generator) -> int:
        cdf = np.cumsum(self.probs)
        return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"),
                       len(self.probs) - 1))


@dataclass(frozen=True)
class RestrictedGameSolution:
    sigma_row: MetaStrategy
    sigma_col: MetaStrategy
    value: float


def _validate_matrix(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim != 2 or u.size == 0:
        raise MatrixError("payoff matrix must be 2-D and nonempty")
    if not np.all(np.isfinite(u)):
        raise MatrixError("payoff matrix entries must be finite")
    return u


def _lp_maximin(u: np.ndarray):
    """Row maximin strategy, value, and the column strategy from LP duals."""
    m, n = u.shape
    c = np.zeros(m + 1)
    c[-1] = -1.0  # maximize v
    a_ub = np.hstack([-u.T, np.ones((n, 1))])
    b_ub = np.zeros(n)
    a_eq = np.concatenate([np.ones(m), [0.0]])[None, :]
    bounds = [(0.0, None)] * m + [(None, None)]
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[1.0], bounds=bounds,
                  method="highs")
    if not res.success:
        raise SolverError(f"maximin LP failed: {res.message}")
    sigma = np.maximum(res.x[:m], 0.0)
    duals = getattr(getattr(res, "ineqlin", None), "marginals", None)
    sigma_col = None
    if duals is not None:
        cand = np.maximum(-np.asarray(duals, dtype=float), 0.0)
        if cand.sum() > 0.5:  # dual prices of the minimax player sum to one
            sigma_col = cand / cand.sum()
    return sigma / sigma.sum(), float(res.x[-1]), sigma_col


def _lp_tiebreak_pair(u: np.ndarray, value: float):
    """One block LP pushing both sides' mass onto the earliest indices.

    The slack is far below any caller tolerance, so the refinement can only
    shuffle mass within each side's optimal face; the caller verifies
    soundness and keeps the primary solution otherwise.
    """
    m, n = u.shape
    slack = 1e-12 * (1.0 + abs(value))
    c = np.concatenate([np.arange(m, dtype=float), np.arange(n, dtype=float)])
    a_ub = np.zeros((n + m, m + n))
    a_ub[:n, :m] = -u.T
    a_ub[n:, m:] = u
    b_ub = np.concatenate([np.full(n, -(value - slack)),
                           np.full(m, value + slack)])
    a_eq = np.zeros((2, m + n))
    a_eq[0, :m] = 1.0
    a_eq[1, m:] = 1.0
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[1.0, 1.0],
                  bounds=[(0.0, None)] * (m + n), method="highs")
    if not res.success:
        return None, None
    return _clean_simplex(res.x[:m]), _clean_simplex(res.x[m:])


def _clean_simplex(x: np.ndarray) -> np.ndarray | None:
    x = np.maximum(x, 0.0)
    x[x < 1e-9] = 0.0
    if x.sum() <= 0.0:
        return None
    return x / x.sum()


def _regret_matching(u: np.ndarray, tol: float, max_iters: int = 2_000_000):
    """RM+ with averaged strategies until the duality gap meets tol scaling."""
    m, n = u.shape
    scale = tol * (1.0 + float(np.max(np.abs(u))))
    reg_row = np.zeros(m)
    reg_col = np.zeros(n)
    sum_row = np.zeros(m)
    sum_col = np.zeros(n)
    for t in range(1, max_iters + 1):
        row = np.where(reg_row > 0, reg_row, 0.0)
        row = row / row.sum() if row.sum() > 0 else np.full(m, 1.0 / m)
        col = np.where(reg_col > 0, reg_col, 0.0)
        col = col / col.sum() if col.sum() > 0 else np.full(n, 1.0 / n)
        sum_row += row
        sum_col += col
        row_payoffs = u @ col
        col_payoffs = -(row @ u)
        reg_row = np.maximum(reg_row + row_payoffs - row @ row_payoffs, 0.0)
        reg_col = np.maximum(reg_col + col_payoffs - col @ col_payoffs, 0.0)
        if t % 128 == 0 or t == max_iters:
            avg_row = sum_row / sum_row.sum()
            avg_col = sum_col / sum_col.sum()
            gap = float(np.max(u @ avg_col) - np.min(avg_row @ u))
            if gap <= scale:
                value = float(avg_row @ u @ avg_col)
                return avg_row, avg_col, value
    raise SolverError(
        f"regret matching did not reach duality gap {scale:g} in {max_iters} iterations"
    )


def solve_zero_sum(u, tol: float = 1e-8, method: str = "auto") -> RestrictedGameSolution:
    """Exact maximin/minimax mixed strategies of the zero-sum matrix game."""
    u = _validate_matrix(u)
    if method == "auto":
        method = "lp" if _HAVE_LINPROG else "regret"
    if method == "lp":
        if not _HAVE_LINPROG:
            raise SolverError("LP solver requested but scipy is unavailable")
        sigma_row, value, sigma_col = _lp_maximin(u)
        if sigma_col is None or np.max(u @ sigma_col) > value + 0.5 * tol:
            sigma_col, neg_value, _ = _lp_maximin(-u.T)
            if abs(-neg_value - value) > 0.5 * tol:  # pragma: no cover
                raise SolverError("maximin/minimax LP values disagree")
        ref_row, ref_col = _lp_tiebreak_pair(u, value)
        if ref_row is not None and np.min(ref_row @ u) >= value - 0.5 * tol:
            sigma_row = ref_row
        if ref_col is not None and np.max(u @ ref_col) <= value + 0.5 * tol:
            sigma_col = ref_col
    elif method == "regret":
        sigma_row, sigma_col, value = _regret_matching(u, tol)
    else:
        raise ValueError(f"unknown solve method {method!r}")
    return RestrictedGameSolution(MetaStrategy(sigma_row), MetaStrategy(sigma_col),
                                  float(value))


def exact_exploitability(u, sigma_row: MetaStrategy, sigma_col: MetaStrategy) -> float:
    """max_i (U sigma_col)_i - min_j (sigma_row^T U)_j; zero exactly at a NE."""
    u = _validate_matrix(u)
    best_row = float(np.max(u @ sigma_col.probs))
    best_col = float(np.min(sigma_row.probs @ u))
    return best_row - best_col


def approx_exploitability(sigma_a: MetaStrategy, sigma_v: MetaStrategy,
                          best_response_fn) -> float:
    """Sum of both sides' approximate best-response values against the pair.

    ``best_response_fn(side, opponent_meta)`` trains (or enumerates) a best
    response for ``side`` in {"agent", "adversary"} and returns its value in
    that side's own reward convention.
    """
    _, value_a = best_response_fn("agent", sigma_v)
    _, value_v = best_response_fn("adversary", sigma_a)
    return float(value_a + value_v)


@dataclass
class DoubleOracleTrace:
    """Per-iteration populations and progress of the double-oracle loop."""

    rows: list
    cols: list
    values: list
    exploitabilities: list


def double_oracle_matrix(full_game, seed: int = 0, tol: float = 1e-8,
                         method: str = "auto", initial: tuple | None = None):
    """Exact double oracle on a finite zero-sum matrix game.

    Starts from one seeded pure strategy per side, alternates restricted-game
    solving with exact pure best responses, and stops once the restricted
    solution's full-game exploitability drops to ``tol``. Finiteness of the
    strategy sets guarantees termination.
    """
    u = _validate_matrix(full_game)
    k_rows, k_cols = u.shape
    rng = np.random.default_rng(seed)
    if initial is None:
        i0 = int(rng.integers(k_rows))
        j0 = int(rng.integers(k_cols))
    else:
        i0, j0 = int(initial[0]), int(initial[1])
    rows = [i0]
    cols = [j0]
    trace = DoubleOracleTrace(rows=[tuple(rows)], cols=[tuple(cols)], values=[],
                              exploitabilities=[])
    iterations = 0
    solution = None
    for _ in range(k_rows * k_cols + 2):
        iterations += 1
        sub = u[np.ix_(rows, cols)]
        sol = solve_zero_sum(sub, tol=tol, method=method)
        row_payoffs = u[:, cols] @ sol.sigma_col.probs
        col_payoffs = sol.sigma_row.probs @ u[rows, :]
        br_row = int(np.argmax(row_payoffs))
        br_col = int(np.argmin(col_payoffs))
        exploit = float(row_payoffs[br_row] - col_payoffs[br_col])
        sigma_row_full = np.zeros(k_rows)
        sigma_row_full[rows] = sol.sigma_row.probs
        sigma_col_full = np.zeros(k_cols)
        sigma_col_full[cols] = sol.sigma_col.probs
        solution = RestrictedGameSolution(MetaStrategy(sigma_row_full),
                                          MetaStrategy(sigma_col_full), sol.value)
        trace.values.append(sol.value)
        trace.exploitabilities.append(exploit)
        if exploit <= tol:
            break
        grew = False
        if br_row not in rows:
            rows.append(br_row)
            grew = True
        if br_col not in cols:
            cols.append(br_col)
            grew = True
        trace.rows.append(tuple(rows))
        trace.cols.append(tuple(cols))
        if not grew:
            # both best responses already present implies exploit ~ 0
            break
    return solution, iterations, trace


class PayoffMatrix:
    """Growing empirical payoff matrix with per-cell sample bookkeeping."""

    def __init__(self, min_count: int = 1):
        self.min_count = min_count
        self.n_rows = 0
        self.n_cols = 0
        self._mean: dict = {}
        self._stderr: dict = {}
        self._count: dict = {}

    def add_row(self) -> int:
        self.n_rows += 1
        return self.n_rows - 1

    def add_col(self) -> int:
        self.n_cols += 1
        return self.n_cols - 1

    def set_entry(self, i: int, j: int, mean: float, stderr: float, count: int) -> None:
        if not (0 <= i < self.n_rows and 0 <= j < self.n_cols):
            raise MatrixError(f"cell ({i}, {j}) outside {self.n_rows}x{self.n_cols}")
        self._mean[(i, j)] = float(mean)
        self._stderr[(i, j)] = float(stderr)
        self._count[(i, j)] = int(count)

    def has_entry(self, i: int, j: int) -> bool:
        return (i, j) in self._mean

    def missing(self) -> list:
        return [(i, j) for i in range(self.n_rows) for j in range(self.n_cols)
                if (i, j) not in self._mean]

    def as_array(self) -> np.ndarray:
        missing = self.missing()
        if missing:
            raise MatrixError(f"payoff matrix incomplete: missing {missing[:4]}...")
        short = [(ij, c) for ij, c in self._count.items() if c < self.min_count]
        if short:
            raise MatrixError(f"cells below the minimum sample count: {short[:4]}")
        u = np.empty((self.n_rows, self.n_cols))
        for (i, j), v in self._mean.items():
            u[i, j] = v
        return u

    def counts_array(self) -> np.ndarray:
        c = np.zeros((self.n_rows, self.n_cols), dtype=int)
        for (i, j), v in self._count.items():
            c[i, j] = v
        return c

    def stderr_array(self) -> np.ndarray:
        s = np.zeros((self.n_rows, self.n_cols))
        for (i, j), v in self._stderr.items():
            s[i, j] = v
        return s

    def to_dict(self) -> dict:
        return {
            "min_count": self.min_count,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "cells": [
                [i, j, self._mean[(i, j)], self._stderr[(i, j)], self._count[(i, j)]]
                for (i, j) in sorted(self._mean)
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "PayoffMatrix":
        pm = PayoffMatrix(min_count=int(d["min_count"]))
        pm.n_rows = int(d["n_rows"])
        pm.n_cols = int(d["n_cols"])
        for i, j, mean, stderr, count in d["cells"]:
            pm.set_entry(int(i), int(j), mean, stderr, int(count))
        return pm

    def write_csv(self, path: str, row_ids=None, col_ids=None) -> None:
        """CSV of means plus a JSON sidecar of counts and standard errors."""
        row_ids = row_ids or [f"agent_{i}" for i in range(self.n_rows)]
        col_ids = col_ids or [f"adversary_{j}" for j in range(self.n_cols)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["", *col_ids])
            for i in range(self.n_rows):
                row = [row_ids[i]] + [
                    repr(self._mean[(i, j)]) if (i, j) in self._mean else ""
                    for j in range(self.n_cols)
                ]
                writer.writerow(row)
        sidecar = {
            "counts": self.counts_array().tolist(),
            "stderr": self.stderr_array().tolist(),
            "row_ids": row_ids,
            "col_ids": col_ids,
        }
        with open(f"{path}.meta.json", "w") as fh:
            json.dump(sidecar, fh, sort_keys=True, indent=1)


def estimate_payoff_entry(agent, adversary, env, n_episodes: int,
                          rng: np.random.Generator, budget=None,
                          agent_mode: str = "sample", adversary_mode: str = "sample"):
    """Mean and stderr of the agent's episodic return over seeded rollouts."""
    from .rollout import rollout

    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    returns = np.empty(n_episodes)
    for k in range(n_episodes):
        seed = int(rng.integers(2 ** 63))
        traj = rollout(env, agent, adversary=adversary, budget=budget, seed=seed,
                       agent_mode=agent_mode, adversary_mode=adversary_mode)
        returns[k] = traj.episode_return
    if np.all(returns == returns[0]):
        # deterministic cell: report the exact common value, not a rounded mean
        return float(returns[0]), 0.0
    mean = float(np.mean(returns))
    stderr = float(np.std(returns, ddof=1) / np.sqrt(n_episodes))
    return mean, stderr
