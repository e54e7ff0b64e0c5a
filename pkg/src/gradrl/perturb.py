"""Perturbation budgets, feasible sets, and exact projections.

Two constraints define feasibility of a perturbation sequence p_0..p_T:

* magnitude:  ||p_t|| <= epsilon for every step, and
* coupling:   ||p_{t+1} - p_t|| <= epsilon_bar between consecutive steps,

in the budget's norm (Linf by default, L2 optional). When
epsilon_bar >= 2*epsilon the coupled feasible set collapses to the plain
epsilon-ball for any feasible previous perturbation, since
||p - prev|| <= ||p|| + ||prev|| <= 2*epsilon.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

# Slack applied by the auditor to absorb floating-point projection residue.
FEASIBILITY_SLACK = 1e-9

_DYKSTRA_MAX_ITER = 100
_DYKSTRA_TOL = 1e-9


class BudgetError(ValueError):
    """Invalid budget or attack-domain configuration."""


class ContractViolation(RuntimeError):
    """A caller handed the projection an infeasible coupling context."""


class AttackDomain(str, Enum):
    STATE = "state"
    ACTION = "action"
    MIXED = "mixed"
    MODEL_UNCERTAINTY = "model_uncertainty"


@dataclass(frozen=True)
class PerturbationBudget:
    """Per-step magnitude bound epsilon and step-to-step bound epsilon_bar."""

    epsilon: float
    epsilon_bar: float
    norm: str = "linf"
    domain: AttackDomain = AttackDomain.STATE
    alpha: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise BudgetError(f"epsilon must be a finite nonnegative real, got {self.epsilon}")
        if not math.isfinite(self.epsilon_bar) or self.epsilon_bar < 0:
            raise BudgetError(f"epsilon_bar must be a finite nonnegative real, got {self.epsilon_bar}")
        if self.norm not in ("linf", "l2"):
            raise BudgetError(f"norm must be 'linf' or 'l2', got {self.norm!r}")
        if not isinstance(self.domain, AttackDomain):
            object.__setattr__(self, "domain", AttackDomain(self.domain))
        if self.alpha is not None and not (0.0 <= self.alpha <= 1.0):
            raise BudgetError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.domain is AttackDomain.MODEL_UNCERTAINTY and self.alpha is None:
            raise BudgetError("model_uncertainty domain requires alpha")

    @property
    def decouples(self) -> bool:
        """True when the coupling constraint is vacuous (epsilon_bar >= 2*epsilon)."""
        return self.epsilon_bar >= 2.0 * self.epsilon

    def scaled(self, fraction: float) -> "PerturbationBudget":
        """Budget with both bounds scaled by ``fraction`` (schedule warmup)."""
        return PerturbationBudget(
            epsilon=self.epsilon * fraction,
            epsilon_bar=self.epsilon_bar * fraction,
            norm=self.norm,
            domain=self.domain,
            alpha=self.alpha,
        )

    def to_config(self) -> dict:
        cfg = {
            "epsilon": self.epsilon,
            "epsilon_bar": self.epsilon_bar,
            "norm": self.norm,
            "domain": self.domain.value,
        }
        if self.alpha is not None:
            cfg["alpha"] = self.alpha
        return cfg

    @staticmethod
    def from_config(cfg: dict) -> "PerturbationBudget":
        return PerturbationBudget(
            epsilon=float(cfg["epsilon"]),
            epsilon_bar=float(cfg["epsilon_bar"]),
            norm=cfg.get("norm", "linf"),
            domain=AttackDomain(cfg.get("domain", "state")),
            alpha=cfg.get("alpha"),
        )


@dataclass
class CouplingContext:
    """Carries the previous applied perturbation (none at t = 0).

    ``window > 0`` additionally keeps a ring buffer of the last ``window``
    perturbations for the short-term memorized attacker, whose coupling
    anchor is the buffer mean rather than the single previous step.
    """

    prev: np.ndarray | None = None
    window: int = 0
    buffer: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.window:
            self.buffer = deque(self.buffer, maxlen=self.window)

    def update(self, p: np.ndarray) -> None:
        p = np.asarray(p, dtype=float)
        self.prev = p.copy()
        if self.window:
            self.buffer.append(p.copy())

    def buffer_mean(self) -> np.ndarray | None:
        if not self.buffer:
            return None
        return np.mean(np.asarray(self.buffer, dtype=float), axis=0)


def vector_norm(v: np.ndarray, norm: str) -> float:
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return 0.0
    if norm == "linf":
        return float(np.max(np.abs(v)))
    return float(np.sqrt(np.dot(v, v)))


def _project_ball(v: np.ndarray, center: np.ndarray, radius: float, norm: str) -> np.ndarray:
    """Nearest point of the ``norm``-ball of ``radius`` around ``center``."""
    d = v - center
    if norm == "linf":
        return center + np.clip(d, -radius, radius)
    n = float(np.sqrt(np.dot(d, d)))
    if n <= radius or n == 0.0:
        return v.astype(float, copy=True)
    return center + d * (radius / n)


def project_admissible(p_raw: np.ndarray, budget: PerturbationBudget) -> np.ndarray:
    """Nearest point of {||p|| <= epsilon} to ``p_raw``."""
    p_raw = np.asarray(p_raw, dtype=float)
    if not np.all(np.isfinite(p_raw)):
        raise BudgetError("project_admissible requires finite input")
    return _project_ball(p_raw, np.zeros_like(p_raw), budget.epsilon, budget.norm)


def _shrink_to_feasible(x, prev, eps, ebar):
    # Move x toward prev (which lies in both balls) just enough to restore
    # exact feasibility after Dykstra's finite iteration budget.
    d = x - prev
    t = 1.0
    nd = float(np.sqrt(np.dot(d, d)))
    if nd > ebar and nd > 0.0:
        t = min(t, ebar / nd)
    a = float(np.dot(d, d))
    b = 2.0 * float(np.dot(prev, d))
    c = float(np.dot(prev, prev)) - eps * eps
    if a > 0.0:
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            t_ball = (-b + math.sqrt(disc)) / (2.0 * a)
            if t_ball >= 0.0:
                t = min(t, t_ball)
    return prev + t * d


def _dykstra_coupled_l2(p_raw, prev, eps, ebar):
    zero = np.zeros_like(p_raw)
    x = p_raw.astype(float, copy=True)
    inc_p = np.zeros_like(x)
    inc_q = np.zeros_like(x)
    for _ in range(_DYKSTRA_MAX_ITER):
        y = _project_ball(x + inc_p, zero, eps, "l2")
        inc_p = x + inc_p - y
        x_new = _project_ball(y + inc_q, prev, ebar, "l2")
        inc_q = y + inc_q - x_new
        if np.max(np.abs(x_new - x)) <= _DYKSTRA_TOL:
            x = x_new
            break
        x = x_new
    # Dykstra converges to the projection but a truncated run may sit a hair
    # outside one ball; pull toward the known-feasible prev.
    if np.dot(x, x) > eps * eps or np.dot(x - prev, x - prev) > ebar * ebar:
        x = _shrink_to_feasible(x, prev, eps, ebar)
    return x


def project_coupled(
    p_raw: np.ndarray, ctx: CouplingContext | None, budget: PerturbationBudget
) -> np.ndarray:
    """Feasible point of {||p|| <= eps} inter {||p - prev|| <= eps_bar}.

    With no previous perturbation this is ``project_admissible``. For Linf
    the intersection is a box and the nearest point is the coordinate-wise
    clamp; for L2 a Dykstra alternating projection returns a feasible,
    near-nearest point. The intersection is nonempty whenever
    ||prev|| <= epsilon, since prev itself is feasible.
    """
    p_raw = np.asarray(p_raw, dtype=float)
    if not np.all(np.isfinite(p_raw)):
        raise BudgetError("project_coupled requires finite input")
    prev = None if ctx is None else ctx.prev
    if prev is None:
        return project_admissible(p_raw, budget)
    prev = np.asarray(prev, dtype=float)
    if prev.shape != p_raw.shape:
        raise BudgetError(
            f"prev perturbation dimension {prev.shape} does not match input {p_raw.shape}"
        )
    eps, ebar = budget.epsilon, budget.epsilon_bar
    if vector_norm(prev, budget.norm) > eps + FEASIBILITY_SLACK:
        raise ContractViolation(
            f"coupling context infeasible: ||prev||_{budget.norm} = "
            f"{vector_norm(prev, budget.norm):.12g} > epsilon = {eps:.12g}"
        )
    if budget.norm == "linf":
        lo = np.maximum(-eps, prev - ebar)
        hi = np.minimum(eps, prev + ebar)
        return np.clip(p_raw, lo, hi)
    if ebar == 0.0:
        return prev.copy()
    return _dykstra_coupled_l2(p_raw, prev, eps, ebar)


@dataclass(frozen=True)
class SequenceReport:
    """Per-step audit of a perturbation sequence against a budget."""

    magnitude_ok: tuple
    coupling_ok: tuple
    passed: bool


def check_sequence(perturbations, budget: PerturbationBudget) -> SequenceReport:
    """Audit ||p_t|| <= eps and ||p_{t+1} - p_t|| <= eps_bar with slack.

    ``coupling_ok[t]`` reports the pair (t-1, t); entry 0 is vacuously true.
    """
    ps = [np.asarray(p, dtype=float) for p in perturbations]
    if not ps:
        raise BudgetError("check_sequence requires a nonempty sequence")
    dim = ps[0].shape
    for p in ps:
        if p.shape != dim:
            raise BudgetError("check_sequence requires uniform dimension")
    mag = tuple(
        vector_norm(p, budget.norm) <= budget.epsilon + FEASIBILITY_SLACK for p in ps
    )
    coup = [True]
    for a, b in zip(ps[:-1], ps[1:]):
        coup.append(
            vector_norm(b - a, budget.norm) <= budget.epsilon_bar + FEASIBILITY_SLACK
        )
    return SequenceReport(
        magnitude_ok=mag, coupling_ok=tuple(coup), passed=all(mag) and all(coup)
    )


def apply_model_uncertainty(
    action: np.ndarray, alpha: float, rng: np.random.Generator, bounds: np.ndarray
) -> np.ndarray:
    """With probability alpha, replace the action by a uniform draw over bounds."""
    if not (0.0 <= alpha <= 1.0):
        raise BudgetError(f"alpha must lie in [0, 1], got {alpha}")
    action = np.asarray(action, dtype=float)
    if rng.random() < alpha:
        bounds = np.asarray(bounds, dtype=float)
        return rng.uniform(bounds[:, 0], bounds[:, 1])
    return action.copy()


def sample_ball(dim: int, budget: PerturbationBudget, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the plain epsilon-ball in the budget's norm."""
    eps = budget.epsilon
    if eps == 0.0:
        return np.zeros(dim)
    if budget.norm == "linf":
        return rng.uniform(-eps, eps, size=dim)
    direction = rng.standard_normal(dim)
    n = np.sqrt(np.dot(direction, direction))
    if n == 0.0:
        return np.zeros(dim)
    radius = eps * rng.random() ** (1.0 / dim)
    return direction * (radius / n)
