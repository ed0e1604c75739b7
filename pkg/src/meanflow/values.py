"""Exact and Monte Carlo evaluation of regularized values on finite MDPs.

All solvers here consume any finite model exposing P (S, A, S), u_b (S, A),
rho (A,), beta, and p0 (S,); both the budget-discretized product MDP and the
bare FiniteMdp carrier below qualify. The exact backend solves the linear
Bellman system for a fixed softmax policy; the Monte Carlo backend simulates
the finite chain with an automatically chosen horizon whose geometric tail is
certified below a requested tolerance. dp_optimal is the unregularized,
untruncated value-iteration oracle whose optimum anchors the convergence
experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdp import MdpValidationError, ROW_SUM_TOL, truncate_reward
from .policy import PolicyEval

EXACT_BACKEND_MAX_STATES = 5000
VISITATION_RESIDUAL_TOL = 1e-10


@dataclass
class FiniteMdp:
    """Minimal finite MDP carrier for the solvers in this module."""

    P: np.ndarray
    u_b: np.ndarray
    rho: np.ndarray
    beta: float
    p0: np.ndarray

    def __post_init__(self) -> None:
        self.P = np.asarray(self.P, dtype=float)
        self.u_b = np.asarray(self.u_b, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        self.p0 = np.asarray(self.p0, dtype=float)
        s, a = self.u_b.shape
        if self.P.shape != (s, a, s):
            raise MdpValidationError("P must have shape (S, A, S)")
        if np.abs(self.P.sum(axis=2) - 1.0).max() > ROW_SUM_TOL:
            raise MdpValidationError("transition rows must sum to 1")
        if not 0 < self.beta < 1:
            raise MdpValidationError("discount beta must lie in (0, 1)")

    @property
    def n_states(self) -> int:
        return self.u_b.shape[0]

    @property
    def n_actions(self) -> int:
        return self.u_b.shape[1]


@dataclass
class ScheduleStage:
    """One stage of the approximation schedule.

    m is the reward truncation level (np.inf turns truncation off), eps the
    reward-regularization strength, kappa the parameter-regularization weight,
    sigma the mollifier variance.
    """

    n: int
    m: float
    eps: float
    kappa: float
    sigma: float

    def __post_init__(self) -> None:
        if not (self.m > 0):
            raise MdpValidationError("truncation level m must be positive")
        if self.eps < 0:
            raise MdpValidationError("eps must be nonnegative")
        if self.kappa < 0:
            raise MdpValidationError("kappa must be nonnegative")
        if not (self.sigma > 0):
            raise MdpValidationError("sigma must be positive")


def validate_schedule(stages: Sequence[ScheduleStage]) -> None:
    """Truncation levels must strictly increase, eps strictly decrease."""
    if not stages:
        raise MdpValidationError("schedule must contain at least one stage")
    for prev, cur in zip(stages, stages[1:]):
        if not (cur.m > prev.m):
            raise MdpValidationError(
                f"m must strictly increase across stages ({prev.m} -> {cur.m})"
            )
        if not (cur.eps < prev.eps):
            raise MdpValidationError(
                f"eps must strictly decrease across stages ({prev.eps} -> {cur.eps})"
            )


@dataclass
class Visitation:
    """Normalized discounted state occupancy of a fixed policy."""

    d: np.ndarray
    residual: float


@dataclass
class ValueReport:
    value: float
    per_state: np.ndarray
    q: np.ndarray | None
    backend: str
    stderr: float | None = None
    horizon: int | None = None
    tail_bound: float | None = None


def policy_transition(pe: PolicyEval, mdp) -> np.ndarray:
    """State-to-state kernel P_pi(s, s') = sum_a mass(a|s) P(s, a, s')."""
    return np.einsum("sa,sat->st", pe.masses, mdp.P)


def stationary_visitation(pe: PolicyEval, mdp) -> Visitation:
    """Solve (I - beta P_pi^T) d = (1 - beta) p0 and verify the residual."""
    p_pi = policy_transition(pe, mdp)
    n = mdp.P.shape[0]
    lhs = np.eye(n) - mdp.beta * p_pi.T
    d = np.linalg.solve(lhs, (1.0 - mdp.beta) * mdp.p0)
    residual = float(
        np.abs(d - (1.0 - mdp.beta) * mdp.p0 - mdp.beta * (p_pi.T @ d)).max()
    )
    if residual > VISITATION_RESIDUAL_TOL:
        raise MdpValidationError(f"visitation solve residual {residual:.3e} too large")
    return Visitation(d=d, residual=residual)


def _reg_term(pe: PolicyEval, stage: ScheduleStage, f: Callable | None) -> np.ndarray:
    if f is None or stage.eps == 0.0:
        return np.zeros_like(pe.dens)
    vals = np.asarray(f(pe.dens), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise MdpValidationError("reward regularizer F returned non-finite values")
    return stage.eps * vals


def value_n(
    pe: PolicyEval, mdp, stage: ScheduleStage, f: Callable | None = None
) -> ValueReport:
    """Exact regularized value of the softmax policy via a linear solve.

    Per-state values solve V = r_pi + beta P_pi V with per-state reward
    r_pi(s) = sum_a mass(a|s) [max(-m, u_b(s, a)) - eps F(dens(a|s))]; the
    scalar value contracts against p0.
    """
    n = mdp.P.shape[0]
    if n > EXACT_BACKEND_MAX_STATES:
        raise MdpValidationError(
            f"exact backend capped at {EXACT_BACKEND_MAX_STATES} states, got {n}"
        )
    u_trunc = truncate_reward(mdp.u_b, stage.m)
    r_table = u_trunc - _reg_term(pe, stage, f)
    r_pi = np.einsum("sa,sa->s", pe.masses, r_table)
    p_pi = policy_transition(pe, mdp)
    per_state = np.linalg.solve(np.eye(n) - mdp.beta * p_pi, r_pi)
    q = u_trunc + mdp.beta * np.einsum("sat,t->sa", mdp.P, per_state)
    return ValueReport(
        value=float(mdp.p0 @ per_state),
        per_state=per_state,
        q=q,
        backend="exact",
    )


def q_n(pe: PolicyEval, mdp, stage: ScheduleStage, f: Callable | None = None) -> np.ndarray:
    return value_n(pe, mdp, stage, f).q


def visitation_value(
    pe: PolicyEval, mdp, stage: ScheduleStage, f: Callable | None = None
) -> float:
    """Occupancy form of the value: (1/(1-beta)) sum_s d(s) r_pi(s)."""
    vis = stationary_visitation(pe, mdp)
    u_trunc = truncate_reward(mdp.u_b, stage.m)
    r_table = u_trunc - _reg_term(pe, stage, f)
    r_pi = np.einsum("sa,sa->s", pe.masses, r_table)
    return float(vis.d @ r_pi) / (1.0 - mdp.beta)


def auto_horizon(mdp, stage: ScheduleStage, c0: float = 0.0, tol: float = 1e-6) -> tuple[int, float]:
    """Smallest T with beta^T (m + max(0, sup u) + eps C0) / (1 - beta) <= tol."""
    m_eff = stage.m if np.isfinite(stage.m) else float(np.abs(mdp.u_b).max())
    u_plus = float(max(0.0, mdp.u_b.max()))
    amp = (m_eff + u_plus + stage.eps * c0) / (1.0 - mdp.beta)
    if amp <= tol:
        return 1, amp
    t = int(np.ceil(np.log(tol / amp) / np.log(mdp.beta)))
    t = max(t, 1)
    return t, amp * mdp.beta**t


def mc_value(
    pe: PolicyEval,
    mdp,
    stage: ScheduleStage,
    f: Callable | None = None,
    n_rollouts: int = 1000,
    rng: np.random.Generator | int = 0,
    tail_tol: float = 1e-6,
    c0: float = 0.0,
    horizon: int | None = None,
) -> ValueReport:
    """Monte Carlo value estimate on the finite chain, vectorized over rollouts.

    The horizon defaults to the smallest T whose certified geometric tail is
    below tail_tol; pass c0 = max |F| over the admissible density range to
    account for the regularization term in that bound.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if horizon is None:
        horizon, tail = auto_horizon(mdp, stage, c0=c0, tol=tail_tol)
    else:
        m_eff = stage.m if np.isfinite(stage.m) else float(np.abs(mdp.u_b).max())
        amp = (m_eff + max(0.0, mdp.u_b.max()) + stage.eps * c0) / (1.0 - mdp.beta)
        tail = amp * mdp.beta**horizon
    u_trunc = truncate_reward(mdp.u_b, stage.m)
    r_table = u_trunc - _reg_term(pe, stage, f)
    cum_mass = np.cumsum(pe.masses, axis=1)
    cum_p = np.cumsum(mdp.P, axis=2)
    states = rng.choice(mdp.P.shape[0], size=n_rollouts, p=mdp.p0)
    returns = np.zeros(n_rollouts)
    disc = 1.0
    for _ in range(horizon):
        draws = rng.random(n_rollouts)
        actions = (draws[:, None] > cum_mass[states]).sum(axis=1)
        returns += disc * r_table[states, actions]
        draws = rng.random(n_rollouts)
        states = (draws[:, None] > cum_p[states, actions]).sum(axis=1)
        disc *= mdp.beta
    value = float(returns.mean())
    stderr = float(returns.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return ValueReport(
        value=value,
        per_state=np.array([]),
        q=None,
        backend="monte_carlo",
        stderr=stderr,
        horizon=horizon,
        tail_bound=float(tail),
    )


@dataclass
class DpReport:
    """Value-iteration output on the untruncated, unregularized model."""

    v_star: np.ndarray
    policy: np.ndarray
    j0_opt: float
    iterations: int
    residuals: list[float] = field(default_factory=list)


def dp_optimal(mdp, tol: float = 1e-10, max_iter: int = 100_000) -> DpReport:
    """Value iteration to sup-norm residual tol; greedy ties break low.

    Works on the barrier-shaped reward table directly (no truncation, no
    reward regularization); j0_opt = -p0 . V* is the target optimum for the
    schedule-based objective.
    """
    v = np.zeros(mdp.P.shape[0])
    residuals: list[float] = []
    for it in range(1, max_iter + 1):
        q = mdp.u_b + mdp.beta * np.einsum("sat,t->sa", mdp.P, v)
        v_new = q.max(axis=1)
        res = float(np.abs(v_new - v).max())
        residuals.append(res)
        v = v_new
        if res <= tol:
            policy = q.argmax(axis=1)
            return DpReport(
                v_star=v,
                policy=policy,
                j0_opt=float(-(mdp.p0 @ v)),
                iterations=it,
                residuals=residuals,
            )
    ratios = [
        residuals[i + 1] / residuals[i]
        for i in range(len(residuals) - 1)
        if residuals[i] > 0
    ]
    raise MdpValidationError(
        "value iteration failed to reach tolerance "
        f"{tol:.1e} in {max_iter} iterations; last residual {residuals[-1]:.3e}, "
        f"max contraction ratio {max(ratios):.6f} (should be <= beta={mdp.beta})"
    )
