"""Transport distances between ensembles and empirical safety statistics.

Only equal-count uniform-weight clouds are supported: the descent loop never
changes N, so exact optimal transport reduces to sorting in one dimension and
to a linear assignment problem in general. W1 feeds the Lipschitz probes, W2
the convergence-rate fits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .mdp import DiscretizedMdp
from .policy import FeatureMap, ParticleEnsemble, policy_eval

ASSIGNMENT_MAX_N = 1024


class MetricsError(ValueError):
    pass


@dataclass
class TransportResult:
    cost: float
    plan: np.ndarray | None
    p: float


def w_p_1d(xs: np.ndarray, ys: np.ndarray, p: float = 2.0) -> float:
    """Exact W_p between equal-count 1D clouds via sorting."""
    xs = np.asarray(xs, dtype=float).reshape(-1)
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if xs.size != ys.size:
        raise MetricsError("1D transport needs equal particle counts")
    if xs.size == 0:
        raise MetricsError("empty clouds have no transport distance")
    diffs = np.abs(np.sort(xs) - np.sort(ys))
    return float(np.mean(diffs**p) ** (1.0 / p))


def w_p_assignment(xs: np.ndarray, ys: np.ndarray, p: float = 2.0) -> TransportResult:
    """Exact W_p between equal-count clouds by optimal assignment.

    Cost of a pair is the euclidean distance to the p-th power; the returned
    plan is the permutation matching xs[i] to ys[plan[i]].
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if xs.shape != ys.shape:
        raise MetricsError("assignment transport needs matching cloud shapes")
    n = xs.shape[0]
    if n > ASSIGNMENT_MAX_N:
        raise MetricsError(f"assignment capped at N = {ASSIGNMENT_MAX_N}, got {n}")
    diff = xs[:, None, :] - ys[None, :, :]
    cost_matrix = np.linalg.norm(diff, axis=2) ** p
    rows, cols = linear_sum_assignment(cost_matrix)
    cost = float(np.mean(cost_matrix[rows, cols]) ** (1.0 / p))
    plan = cols[np.argsort(rows)]
    return TransportResult(cost=cost, plan=plan, p=p)


def w2(xs: np.ndarray, ys: np.ndarray) -> float:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[1] == 1:
        return w_p_1d(xs, ys, 2.0)
    return w_p_assignment(xs, ys, 2.0).cost


def w1(xs: np.ndarray, ys: np.ndarray) -> float:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[1] == 1:
        return w_p_1d(xs, ys, 1.0)
    return w_p_assignment(xs, ys, 1.0).cost


@dataclass
class ViolationReport:
    rate: float
    half_width: float
    n_rollouts: int
    horizon: int

    @property
    def upper(self) -> float:
        return min(1.0, self.rate + self.half_width)


def violation_rate(
    ensemble: ParticleEnsemble,
    features: FeatureMap,
    dmdp: DiscretizedMdp,
    n_rollouts: int,
    horizon: int,
    rng: np.random.Generator | int = 0,
) -> ViolationReport:
    """Fraction of exact-budget trajectories that ever drive a budget negative.

    The base process runs with continuous budgets; the policy is looked up at
    the nearest discretized budget cell each step. All rollouts advance in
    lockstep, vectorized.
    """
    if n_rollouts < 1:
        raise MetricsError("need at least one rollout")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    base = dmdp.base
    pe = policy_eval(ensemble, features, dmdp.rho)
    cum_mass = np.cumsum(pe.masses, axis=1)
    cum_p = np.cumsum(base.P, axis=2)
    n_cells = dmdp.n_states // base.n_states
    states = rng.choice(base.n_states, size=n_rollouts, p=base.p0)
    z = np.tile(base.safety.b, (n_rollouts, 1))
    violated = np.zeros(n_rollouts, dtype=bool)
    for _ in range(horizon):
        cells = dmdp.project_z_batch(z)
        aug = states * n_cells + cells
        draws = rng.random(n_rollouts)
        actions = (draws[:, None] > cum_mass[aug]).sum(axis=1)
        z = (z - base.safety.g[:, states, actions].T) / base.safety.beta_g[None, :]
        violated |= (z < 0).any(axis=1)
        draws = rng.random(n_rollouts)
        states = (draws[:, None] > cum_p[states, actions]).sum(axis=1)
    rate = float(violated.mean())
    half_width = float(1.96 * np.sqrt(max(rate * (1 - rate), 1e-12) / n_rollouts))
    return ViolationReport(
        rate=rate, half_width=half_width, n_rollouts=n_rollouts, horizon=horizon
    )
