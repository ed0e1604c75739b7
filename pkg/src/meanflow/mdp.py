"""Safety-constrained MDPs: budget augmentation, barrier penalties, reward truncation.

A finite MDP carries per-constraint safety costs g_k(s, a) >= 0, initial budgets
b_k and discount factors beta_k. The almost-sure constraint

    sum_t beta_k^t g_k(s_t, a_t) <= b_k        for every k, along every trajectory

is tracked by the residual-budget recursion z' = (z - g) / beta_k started from
z_0 = b; a trajectory violates the constraint exactly when some z_{t,k} drops
below zero. A barrier on the updated budget converts the constraint into reward
shaping, and a lower truncation max(-m, .) keeps the shaped reward bounded.

For solvers that need a finite state space the budget axes are discretized onto
uniform grids with nearest-cell projection (`discretize`); rollouts keep the
exact continuous budgets for violation bookkeeping and only project when the
policy is looked up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ROW_SUM_TOL = 1e-9


class MdpValidationError(ValueError):
    """Raised when an MDP definition violates a structural invariant."""


@dataclass
class SafetySpec:
    """Per-constraint safety costs, initial budgets, and budget discounts.

    g has shape (K, S, A) with nonnegative entries, b is (K,) nonnegative,
    beta_g is (K,) with entries in (0, 1).
    """

    g: np.ndarray
    b: np.ndarray
    beta_g: np.ndarray

    def __post_init__(self) -> None:
        self.g = np.asarray(self.g, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.beta_g = np.asarray(self.beta_g, dtype=float)
        if self.g.ndim != 3:
            raise MdpValidationError("safety.g must have shape (K, S, A)")
        k = self.g.shape[0]
        if self.b.shape != (k,) or self.beta_g.shape != (k,):
            raise MdpValidationError("safety.b and safety.beta_g must have shape (K,)")
        if np.any(self.g < 0):
            raise MdpValidationError("safety costs g must be nonnegative")
        if np.any(self.b < 0):
            raise MdpValidationError("initial budgets b must be nonnegative")
        if np.any((self.beta_g <= 0) | (self.beta_g >= 1)):
            raise MdpValidationError("budget discounts beta_g must lie in (0, 1)")

    @property
    def n_constraints(self) -> int:
        return self.g.shape[0]


@dataclass
class BarrierSpec:
    """Barrier strength c > 0 and finite cap M_bar replacing +inf on phi <= 0."""

    c: float = 1.0
    m_bar: float = 100.0

    def __post_init__(self) -> None:
        if not self.c >= 0:
            raise MdpValidationError("barrier scale c must be nonnegative")
        if not self.m_bar > 0:
            raise MdpValidationError("barrier cap M_bar must be positive")


@dataclass
class AugmentedState:
    """Base state index plus the residual budget vector."""

    s: int
    z: np.ndarray

    def is_safe(self) -> bool:
        return bool(np.all(self.z >= 0))


@dataclass
class Trajectory:
    states: list[AugmentedState]
    actions: np.ndarray      # (T,) ints
    rewards: np.ndarray      # (T,)
    phis: np.ndarray         # (T, K) post-step budgets
    violated: bool


def budget_step(z: np.ndarray, s: int, a: int, safety: SafetySpec) -> np.ndarray:
    """Advance the residual budgets: z'_k = (z_k - g_k(s, a)) / beta_k.

    Negative outputs are data (they certify a violation), not errors.
    """
    return (np.asarray(z, dtype=float) - safety.g[:, s, a]) / safety.beta_g


def barrier_components(phi: np.ndarray, barrier: BarrierSpec) -> np.ndarray:
    """Per-constraint barrier values b(phi_k), before the scale c.

    b(phi) = 0 for phi >= 1, min(-log(phi) + phi - 1, M_bar/c) on (0, 1),
    and M_bar/c for phi <= 0. Non-increasing in phi; C1 at the phi = 1 gluing
    (value 0, slope 0); the single kink sits at the inner clamp point.
    """
    phi = np.asarray(phi, dtype=float)
    cap = barrier.m_bar / barrier.c if barrier.c > 0 else 0.0
    out = np.full(phi.shape, cap)
    pos = phi > 0
    with np.errstate(divide="ignore"):
        val = -np.log(phi, where=pos, out=np.zeros_like(phi)) + phi - 1.0
    out[pos] = np.minimum(val[pos], cap)
    out[phi >= 1.0] = 0.0
    return out


def barrier_components_grad(phi: np.ndarray, barrier: BarrierSpec) -> np.ndarray:
    """Derivative of barrier_components wrt each phi_k (zero on clamped branches)."""
    phi = np.asarray(phi, dtype=float)
    cap = barrier.m_bar / barrier.c if barrier.c > 0 else 0.0
    grad = np.zeros(phi.shape)
    pos = phi > 0
    with np.errstate(divide="ignore"):
        val = -np.log(phi, where=pos, out=np.zeros_like(phi)) + phi - 1.0
    active = pos & (phi < 1.0) & (val < cap)
    grad[active] = 1.0 - 1.0 / phi[active]
    return grad


def barrier_eval(phi: np.ndarray, barrier: BarrierSpec) -> float:
    """Total barrier penalty c * sum_k b(phi_k) >= 0."""
    if barrier.c == 0.0:
        return 0.0
    return float(barrier.c * barrier_components(phi, barrier).sum())


def truncate_reward(u_b: float | np.ndarray, m: float) -> float | np.ndarray:
    """Lower truncation max(-m, u_B); m = +inf is a no-op."""
    if m <= 0:
        raise MdpValidationError("truncation level m must be positive")
    return np.maximum(-m, u_b)


@dataclass
class AugmentedMdp:
    """Finite safety-constrained MDP with budget dynamics and a barrier.

    P has shape (S, A, S) with rows summing to 1, u is (S, A) and bounded,
    rho holds positive action reference weights, p0 the initial distribution
    over base states (budgets always start at z_0 = b exactly). z_grid_spec
    holds, per constraint, (lo, hi, cells) for the uniform discretization the
    finite-state solvers use.
    """

    P: np.ndarray
    u: np.ndarray
    rho: np.ndarray
    beta: float
    safety: SafetySpec
    barrier: BarrierSpec
    p0: np.ndarray
    z_grid_spec: list[tuple[float, float, int]] | None = None
    state_labels: list[str] | None = None
    action_labels: list[str] | None = None

    def __post_init__(self) -> None:
        self.P = np.asarray(self.P, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        self.p0 = np.asarray(self.p0, dtype=float)
        s, a = self.u.shape
        if self.P.shape != (s, a, s):
            raise MdpValidationError(f"P must have shape (S, A, S)=({s},{a},{s})")
        row_err = np.abs(self.P.sum(axis=2) - 1.0).max()
        if row_err > ROW_SUM_TOL:
            raise MdpValidationError(f"transition rows must sum to 1 (max error {row_err:.3e})")
        if np.any(self.P < -1e-15):
            raise MdpValidationError("transition probabilities must be nonnegative")
        if not np.all(np.isfinite(self.u)):
            raise MdpValidationError("utility table must be finite")
        if self.rho.shape != (a,) or np.any(self.rho <= 0):
            raise MdpValidationError("rho must be positive with one weight per action")
        if not 0 < self.beta < 1:
            raise MdpValidationError("discount beta must lie in (0, 1)")
        if self.p0.shape != (s,) or abs(self.p0.sum() - 1.0) > ROW_SUM_TOL or np.any(self.p0 < 0):
            raise MdpValidationError("p0 must be a distribution over base states")
        if self.safety.g.shape[1:] != (s, a):
            raise MdpValidationError("safety.g incompatible with (S, A)")
        if self.z_grid_spec is None:
            self.z_grid_spec = [default_z_grid_spec(float(bk)) for bk in self.safety.b]
        if len(self.z_grid_spec) != self.safety.n_constraints:
            raise MdpValidationError("one z-grid spec per constraint required")
        for lo, hi, cells in self.z_grid_spec:
            if not (hi > lo and cells >= 2):
                raise MdpValidationError("z-grid spec needs hi > lo and at least 2 cells")

    @property
    def n_states(self) -> int:
        return self.u.shape[0]

    @property
    def n_actions(self) -> int:
        return self.u.shape[1]

    @property
    def rho_total(self) -> float:
        return float(self.rho.sum())

    @property
    def u_sup_plus(self) -> float:
        """Positive-part sup of the raw utility."""
        return float(max(0.0, self.u.max()))


def augmented_reward(s: int, a: int, z: np.ndarray, mdp: AugmentedMdp) -> float:
    """Barrier-shaped utility u(s, a) - B(phi) with phi the updated budgets."""
    phi = budget_step(z, s, a, mdp.safety)
    return float(mdp.u[s, a]) - barrier_eval(phi, mdp.barrier)


def rollout(
    mdp: AugmentedMdp,
    policy_sampler: Callable[[AugmentedState, np.random.Generator], int],
    horizon: int,
    rng_seed: int | np.random.Generator,
) -> Trajectory:
    """Simulate one trajectory with exact budget bookkeeping.

    s_0 ~ p0, z_0 = b; at each step the sampler picks an action from the
    augmented state, the budgets advance by budget_step, and phi = z_{t+1}
    is recorded. violated is True iff any recorded phi component is negative.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(rng_seed) if not isinstance(rng_seed, np.random.Generator) else rng_seed
    s = int(rng.choice(mdp.n_states, p=mdp.p0))
    z = mdp.safety.b.copy()
    states, actions, rewards, phis = [], [], [], []
    violated = False
    for _ in range(horizon):
        state = AugmentedState(s, z.copy())
        a = int(policy_sampler(state, rng))
        phi = budget_step(z, s, a, mdp.safety)
        r = float(mdp.u[s, a]) - barrier_eval(phi, mdp.barrier)
        states.append(state)
        actions.append(a)
        rewards.append(r)
        phis.append(phi)
        if np.any(phi < 0):
            violated = True
        s = int(rng.choice(mdp.n_states, p=mdp.P[s, a]))
        z = phi
    return Trajectory(
        states, np.array(actions), np.array(rewards), np.array(phis), violated
    )


@dataclass
class DiscretizedMdp:
    """Product MDP over (base state, budget cell) pairs, in standard finite form.

    u_b is the barrier-shaped reward table on the product space; phi holds the
    exact budget-update values used for the barrier (pre-projection), and
    next_cell the projected flat budget-cell index after each (state, action).
    """

    base: AugmentedMdp
    P: np.ndarray            # (S_aug, A, S_aug)
    u_b: np.ndarray          # (S_aug, A)
    rho: np.ndarray
    beta: float
    p0: np.ndarray           # (S_aug,)
    base_state: np.ndarray   # (S_aug,) base index per augmented state
    z_values: np.ndarray     # (S_aug, K) budget coordinates per augmented state
    phi: np.ndarray          # (S_aug, A, K)
    z_axes: list[np.ndarray]

    @property
    def n_states(self) -> int:
        return self.u_b.shape[0]

    @property
    def n_actions(self) -> int:
        return self.u_b.shape[1]

    @property
    def rho_total(self) -> float:
        return float(self.rho.sum())

    @property
    def u_sup_plus(self) -> float:
        return self.base.u_sup_plus

    def project_z(self, z: np.ndarray) -> int:
        """Flat index of the nearest budget cell (per-axis nearest neighbor)."""
        idx = 0
        for k, axis in enumerate(self.z_axes):
            step = axis[1] - axis[0]
            j = int(np.clip(np.rint((z[k] - axis[0]) / step), 0, len(axis) - 1))
            idx = idx * len(axis) + j
        return idx

    def project_z_batch(self, z: np.ndarray) -> np.ndarray:
        """Vectorized project_z over rows of an (R, K) budget array."""
        z = np.asarray(z, dtype=float)
        idx = np.zeros(z.shape[0], dtype=np.int64)
        for k, axis in enumerate(self.z_axes):
            step = axis[1] - axis[0]
            j = np.clip(np.rint((z[:, k] - axis[0]) / step), 0, len(axis) - 1)
            idx = idx * len(axis) + j.astype(np.int64)
        return idx

    def aug_index(self, s: int, z: np.ndarray) -> int:
        n_cells = int(np.prod([len(ax) for ax in self.z_axes]))
        return s * n_cells + self.project_z(z)


def discretize(mdp: AugmentedMdp) -> DiscretizedMdp:
    """Build the finite product MDP over (base state, budget cell)."""
    axes = [np.linspace(lo, hi, cells) for lo, hi, cells in mdp.z_grid_spec]
    cell_shape = tuple(len(ax) for ax in axes)
    n_cells = int(np.prod(cell_shape))
    s_base, n_a = mdp.n_states, mdp.n_actions
    k = mdp.safety.n_constraints
    n_aug = s_base * n_cells

    # budget coordinates per flat cell, row-major over axes
    mesh = np.meshgrid(*axes, indexing="ij")
    z_cells = np.stack([m.ravel() for m in mesh], axis=1)          # (n_cells, K)

    z_values = np.repeat(z_cells[None, :, :], s_base, axis=0).reshape(n_aug, k)
    base_state = np.repeat(np.arange(s_base), n_cells)

    # exact budget updates per (cell, base state, action)
    phi = np.empty((n_aug, n_a, k))
    next_cell = np.empty((n_aug, n_a), dtype=int)
    for s in range(s_base):
        for a in range(n_a):
            ph = (z_cells - mdp.safety.g[:, s, a][None, :]) / mdp.safety.beta_g[None, :]
            rows = s * n_cells + np.arange(n_cells)
            phi[rows, a, :] = ph
            flat = np.zeros(n_cells, dtype=int)
            for j, axis in enumerate(axes):
                step = axis[1] - axis[0]
                jj = np.clip(np.rint((ph[:, j] - axis[0]) / step).astype(int), 0, len(axis) - 1)
                flat = flat * len(axis) + jj
            next_cell[rows, a] = flat

    u_b = np.empty((n_aug, n_a))
    for a in range(n_a):
        comp = barrier_components(phi[:, a, :], mdp.barrier)       # (n_aug, K)
        u_b[:, a] = mdp.u[base_state, a] - mdp.barrier.c * comp.sum(axis=1)

    P = np.zeros((n_aug, n_a, n_aug))
    for s in range(s_base):
        rows = s * n_cells + np.arange(n_cells)
        for a in range(n_a):
            cols_cell = next_cell[rows, a]                          # (n_cells,)
            for sp in range(s_base):
                pr = mdp.P[s, a, sp]
                if pr == 0.0:
                    continue
                P[rows, a, sp * n_cells + cols_cell] += pr

    p0 = np.zeros(n_aug)
    # initial budgets are exactly b; project once
    init_flat = 0
    for j, axis in enumerate(axes):
        step = axis[1] - axis[0]
        jj = int(np.clip(np.rint((mdp.safety.b[j] - axis[0]) / step), 0, len(axis) - 1))
        init_flat = init_flat * len(axis) + jj
    for s in range(s_base):
        p0[s * n_cells + init_flat] = mdp.p0[s]

    return DiscretizedMdp(
        base=mdp, P=P, u_b=u_b, rho=mdp.rho, beta=mdp.beta, p0=p0,
        base_state=base_state, z_values=z_values, phi=phi, z_axes=axes,
    )


def load_mdp_file(path: str) -> AugmentedMdp:
    """Read an MDP definition from a JSON file.

    Schema keys: states, actions, rho, P (dense row-major, nested [s][a][s']),
    u, safety {g, b, beta_g}, barrier {c, M_bar}, beta, p0, z_grid (optional,
    [[lo, hi, cells], ...]). states/actions may be counts or label lists.
    Transition rows off by more than 1e-9 are rejected.
    """
    with open(path) as f:
        raw = json.load(f)
    return mdp_from_dict(raw)


def mdp_from_dict(raw: dict) -> AugmentedMdp:
    def labels(key: str) -> tuple[int, list[str] | None]:
        v = raw[key]
        if isinstance(v, int):
            return v, None
        return len(v), [str(x) for x in v]

    try:
        n_s, state_labels = labels("states")
        n_a, action_labels = labels("actions")
        safety_raw = raw["safety"]
        g = np.asarray(safety_raw["g"], dtype=float)
        if g.ndim == 2:
            g = g[None, :, :]
        b = np.atleast_1d(np.asarray(safety_raw["b"], dtype=float))
        beta_g = np.atleast_1d(np.asarray(safety_raw["beta_g"], dtype=float))
        barrier_raw = raw.get("barrier", {})
        z_grid = raw.get("z_grid")
        if z_grid is None:
            z_grid = [default_z_grid_spec(float(bk)) for bk in b]
        else:
            z_grid = [(float(lo), float(hi), int(c)) for lo, hi, c in z_grid]
        return AugmentedMdp(
            P=np.asarray(raw["P"], dtype=float),
            u=np.asarray(raw["u"], dtype=float),
            rho=np.asarray(raw["rho"], dtype=float),
            beta=float(raw["beta"]),
            safety=SafetySpec(g=g, b=b, beta_g=beta_g),
            barrier=BarrierSpec(c=float(barrier_raw.get("c", 1.0)),
                                m_bar=float(barrier_raw.get("M_bar", 100.0))),
            p0=np.asarray(raw["p0"], dtype=float),
            z_grid_spec=z_grid,
            state_labels=state_labels,
            action_labels=action_labels,
        )
    except KeyError as e:
        raise MdpValidationError(f"missing MDP file key: {e}") from e


def default_z_grid_spec(b_k: float, cells: int = 25) -> tuple[float, float, int]:
    """Uniform grid covering [-0.25*max(1,b)-0.1, 1.25*max(1,b)]."""
    top = 1.25 * max(1.0, b_k)
    lo = -0.25 * max(1.0, b_k) - 0.1
    return (lo, top, cells)


def constraint_satisfied_direct(traj: Trajectory, safety: SafetySpec) -> np.ndarray:
    """Direct check of sum_t beta_k^t g_k(s_t, a_t) <= b_k per constraint.

    Brute-force bookkeeping used as the oracle against the z >= 0 criterion.
    """
    k = safety.n_constraints
    total = np.zeros(k)
    for t, (state, a) in enumerate(zip(traj.states, traj.actions)):
        total += (safety.beta_g ** t) * safety.g[:, state.s, a]
    return total <= safety.b + 1e-12
