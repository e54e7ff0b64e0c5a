"""Desk-scale environments: matrix games and two toy continuous-control tasks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EnvError(ValueError):
    """Invalid environment construction or interaction."""


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_kind: str  # "continuous-box" | "discrete-finite"
    horizon: int
    discount: float
    action_bounds: np.ndarray | None = None  # (action_dim, 2), continuous only

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise EnvError("state_dim and action_dim must be positive")
        if self.action_kind not in ("continuous-box", "discrete-finite"):
            raise EnvError(f"unknown action_kind {self.action_kind!r}")
        if self.horizon < 1:
            raise EnvError("horizon must be >= 1")
        if not (0.0 < self.discount <= 1.0):
            raise EnvError("discount must lie in (0, 1]")
        if self.action_kind == "continuous-box":
            if self.action_bounds is None:
                raise EnvError("continuous actions require bounds")
            b = np.asarray(self.action_bounds, dtype=float)
            if b.shape != (self.action_dim, 2) or not np.all(b[:, 0] < b[:, 1]):
                raise EnvError("action_bounds must be per-dimension [lo, hi] with lo < hi")
            object.__setattr__(self, "action_bounds", b)


class Environment:
    """Seeded, finite-horizon environment; done is forced at t = horizon."""

    two_player = False

    def __init__(self, spec: EnvSpec, seed: int = 0):
        self.spec = spec
        self._seed = seed
        self.rng = np.random.default_rng(seed)
        self.t = 0

    def seed(self, seed) -> None:
        self._seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self, state=None) -> np.ndarray:
        raise NotImplementedError

    def step(self, action, opponent_action=None):
        raise NotImplementedError

    def _check_continuous(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.shape != (self.spec.action_dim,):
            raise EnvError(f"action has shape {a.shape}, expected ({self.spec.action_dim},)")
        b = self.spec.action_bounds
        if np.any(a < b[:, 0] - 1e-9) or np.any(a > b[:, 1] + 1e-9):
            raise EnvError(f"action {a} outside bounds")
        return np.clip(a, b[:, 0], b[:, 1])


class MatrixGameEnv(Environment):
    """One-step zero-sum matrix game: agent picks the row, opponent the column."""

    two_player = True

    def __init__(self, payoff: np.ndarray, seed: int = 0):
        payoff = np.asarray(payoff, dtype=float)
        if payoff.ndim != 2 or payoff.shape[0] != payoff.shape[1] or payoff.shape[0] < 2:
            raise EnvError("payoff must be a square matrix with K >= 2")
        if not np.all(np.isfinite(payoff)):
            raise EnvError("payoff entries must be finite")
        self.payoff = payoff
        k = payoff.shape[0]
        spec = EnvSpec(state_dim=1, action_dim=k, action_kind="discrete-finite",
                       horizon=1, discount=1.0)
        super().__init__(spec, seed)

    def reset(self, state=None) -> np.ndarray:
        self.t = 0
        return np.zeros(1)

    def step(self, action, opponent_action=None):
        if opponent_action is None:
            raise EnvError("matrix game requires an opponent action (column index)")
        i = int(action)
        j = int(opponent_action)
        k = self.payoff.shape[0]
        if not (0 <= i < k and 0 <= j < k):
            raise EnvError(f"actions ({i}, {j}) outside 0..{k - 1}")
        self.t += 1
        return np.zeros(1), float(self.payoff[i, j]), True


class PointMassEnv(Environment):
    """2-D point mass steered by bounded acceleration toward a goal.

    pos <- pos + 0.05 * vel;  vel <- 0.95 * vel + 0.05 * a
    reward = -||pos - goal||_2 - 0.01 * ||a||_2^2, horizon 100.
    Optional wind adds a seeded AR(1) gust to the acceleration.
    """

    HORIZON = 100

    def __init__(self, goal, wind_enabled: bool = False, seed: int = 0):
        goal = np.asarray(goal, dtype=float).reshape(-1)
        if goal.shape != (2,) or np.any(np.abs(goal) > 1.0):
            raise EnvError("goal must lie within [-1, 1]^2")
        self.goal = goal
        self.wind_enabled = bool(wind_enabled)
        bounds = np.array([[-1.0, 1.0], [-1.0, 1.0]])
        spec = EnvSpec(state_dim=4, action_dim=2, action_kind="continuous-box",
                       horizon=self.HORIZON, discount=0.99, action_bounds=bounds)
        super().__init__(spec, seed)
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.wind = np.zeros(2)

    def reset(self, state=None) -> np.ndarray:
        self.t = 0
        self.wind = np.zeros(2)
        if state is not None:
            state = np.asarray(state, dtype=float).reshape(-1)
            if state.shape != (4,):
                raise EnvError("pointmass state is (pos_x, pos_y, vel_x, vel_y)")
            self.pos = state[:2].copy()
            self.vel = state[2:].copy()
        else:
            self.pos = self.rng.uniform(-0.9, 0.9, size=2)
            self.vel = np.zeros(2)
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    def step(self, action, opponent_action=None):
        a = self._check_continuous(action)
        accel = a
        if self.wind_enabled:
            self.wind = 0.95 * self.wind + 0.05 * self.rng.uniform(-0.5, 0.5, size=2)
            accel = a + self.wind
        self.pos = self.pos + 0.05 * self.vel
        self.vel = 0.95 * self.vel + 0.05 * accel
        self.t += 1
        reward = -float(np.linalg.norm(self.pos - self.goal)) - 0.01 * float(np.dot(a, a))
        done = self.t >= self.spec.horizon
        return self._obs(), reward, done


class BalanceEnv(Environment):
    """1-D unstable balance task: gravity tips the pole, torque fights back.

    ang_vel <- ang_vel + 0.05 * (sin(theta) + a);  theta <- theta + 0.05 * ang_vel
    reward = 1 - |theta| / pi per step; terminates early once |theta| > pi/2.
    """

    HORIZON = 200

    def __init__(self, seed: int = 0):
        bounds = np.array([[-1.0, 1.0]])
        spec = EnvSpec(state_dim=2, action_dim=1, action_kind="continuous-box",
                       horizon=self.HORIZON, discount=0.99, action_bounds=bounds)
        super().__init__(spec, seed)
        self.theta = 0.0
        self.ang_vel = 0.0

    def reset(self, state=None) -> np.ndarray:
        self.t = 0
        if state is not None:
            state = np.asarray(state, dtype=float).reshape(-1)
            if state.shape != (2,):
                raise EnvError("balance state is (theta, ang_vel)")
            self.theta, self.ang_vel = float(state[0]), float(state[1])
        else:
            self.theta = float(self.rng.uniform(-0.05, 0.05))
            self.ang_vel = 0.0
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.array([self.theta, self.ang_vel])

    def step(self, action, opponent_action=None):
        a = float(self._check_continuous(action)[0])
        self.ang_vel = self.ang_vel + 0.05 * (np.sin(self.theta) + a)
        self.theta = self.theta + 0.05 * self.ang_vel
        self.t += 1
        reward = 1.0 - abs(self.theta) / np.pi
        done = self.t >= self.spec.horizon or abs(self.theta) > np.pi / 2
        return self._obs(), float(reward), done


def make_matrix_game_env(payoff, seed: int = 0) -> MatrixGameEnv:
    """One-step environment whose reward is the payoff table entry."""
    return MatrixGameEnv(payoff, seed=seed)


def make_pointmass_env(goal, wind_enabled: bool = False, seed: int = 0) -> PointMassEnv:
    return PointMassEnv(goal, wind_enabled=wind_enabled, seed=seed)


def make_balance_env(seed: int = 0) -> BalanceEnv:
    return BalanceEnv(seed=seed)


_ENV_BUILDERS = {
    "matrix": lambda params, seed: make_matrix_game_env(params["payoff"], seed=seed),
    "pointmass": lambda params, seed: make_pointmass_env(
        params.get("goal", (0.5, 0.5)), params.get("wind_enabled", False), seed=seed
    ),
    "balance": lambda params, seed: make_balance_env(seed=seed),
}


def make_env(name: str, params: dict | None = None, seed: int = 0) -> Environment:
    """Build an environment by registry name (used by configs and the CLI)."""
    if name not in _ENV_BUILDERS:
        raise EnvError(f"unknown environment {name!r}; choices: {sorted(_ENV_BUILDERS)}")
    return _ENV_BUILDERS[name](params or {}, seed)
