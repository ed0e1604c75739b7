"""Mean-field softmax policies over a finite action grid.

A policy is parametrized by an ensemble of N particles x_i in R^d through a
bounded feature map psi(s, a, x): the logits are ensemble averages
l(s, a) = (1/N) sum_i psi(s, a, x_i) and the action density w.r.t. the
reference weights rho is dens(a|s) = exp(l(s, a)) / Z(s) with
Z(s) = sum_a rho(a) exp(l(s, a)).

The policy's first variation w.r.t. the parameter measure has the per-action
kernel  v_x(a|s) = [psi(s, a, x) - sum_a' rho(a') dens(a'|s) psi(s, a', x)] * dens(a|s),
whose x-gradient replaces psi by grad_x psi. Both are exposed here, along with
vectorized batch forms used by the flow.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.special import logsumexp


class FeatureMapError(ValueError):
    pass


class FeatureMap(Protocol):
    """Bounded feature map with analytic gradient and declared norm bounds.

    sup_norm bounds |psi|, grad_sup_norm bounds |grad_x psi|_2, hess_sup_norm
    bounds the spectral norm of the x-Hessian (None when smoothness < 2).
    """

    n_states: int
    n_actions: int
    d: int
    sup_norm: float
    grad_sup_norm: float
    hess_sup_norm: float | None
    smoothness: int

    def psi_point(self, x: np.ndarray) -> np.ndarray: ...            # (S, A)
    def grad_point(self, x: np.ndarray) -> np.ndarray: ...           # (S, A, d)
    def psi_batch(self, xs: np.ndarray) -> np.ndarray: ...           # (n, S, A)
    def weighted_grad_sum(self, xs: np.ndarray, coeff: np.ndarray) -> np.ndarray: ...


@dataclass
class TabularIndicatorFeatures:
    """psi(s, a, x) = tanh(x[idx(s, a)]) with idx enumerating (s, a) pairs.

    Needs d >= S*A. Declared norms: |psi| <= 1, |grad| <= 1, |hess| <= 0.77
    (max |tanh''| = 4/(3*sqrt(3))).
    """

    n_states: int
    n_actions: int
    d: int
    sup_norm: float = field(init=False, default=1.0)
    grad_sup_norm: float = field(init=False, default=1.0)
    hess_sup_norm: float | None = field(init=False, default=0.77)
    smoothness: int = field(init=False, default=2)

    def __post_init__(self) -> None:
        if self.d < self.n_states * self.n_actions:
            raise FeatureMapError(
                f"tabular-indicator needs d >= S*A = {self.n_states * self.n_actions}, got d={self.d}"
            )

    def _idx(self) -> np.ndarray:
        return np.arange(self.n_states * self.n_actions).reshape(self.n_states, self.n_actions)

    def eval(self, s: int, a: int, x: np.ndarray) -> float:
        return float(np.tanh(x[s * self.n_actions + a]))

    def grad_x(self, s: int, a: int, x: np.ndarray) -> np.ndarray:
        g = np.zeros(self.d)
        k = s * self.n_actions + a
        g[k] = 1.0 - np.tanh(x[k]) ** 2
        return g

    def psi_point(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x[self._idx()])

    def grad_point(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_states, self.n_actions, self.d))
        idx = self._idx()
        sech2 = 1.0 - np.tanh(x[idx]) ** 2
        s_ix, a_ix = np.meshgrid(np.arange(self.n_states), np.arange(self.n_actions), indexing="ij")
        out[s_ix, a_ix, idx] = sech2
        return out

    def psi_batch(self, xs: np.ndarray) -> np.ndarray:
        return np.tanh(xs[:, self._idx()])

    def weighted_grad_sum(self, xs: np.ndarray, coeff: np.ndarray) -> np.ndarray:
        # sum_{s,a} coeff[s,a] grad psi(s,a,x) lands on coordinate idx(s,a)
        out = np.zeros((xs.shape[0], self.d))
        idx = self._idx().ravel()
        sech2 = 1.0 - np.tanh(xs[:, idx]) ** 2
        out[:, idx] = coeff.ravel()[None, :] * sech2
        return out


@dataclass
class RandomFourierFeatures:
    """psi(s, a, x) = B cos(w_{s,a} . x + phase_{s,a}) with frozen random w, phase.

    Frequencies are N(0, freq_scale^2 I) draws per (s, a); declared norms use
    the realized frequencies, so they are exact bounds for this instance.
    """

    n_states: int
    n_actions: int
    d: int
    bound: float = 1.0
    freq_scale: float = 1.0
    seed: int = 0
    smoothness: int = field(init=False, default=2)

    def __post_init__(self) -> None:
        rng = np.random.default_rng(self.seed)
        self.w = rng.normal(0.0, self.freq_scale, size=(self.n_states, self.n_actions, self.d))
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=(self.n_states, self.n_actions))
        wnorm = np.linalg.norm(self.w, axis=2)
        self.sup_norm = float(self.bound)
        self.grad_sup_norm = float(self.bound * wnorm.max())
        self.hess_sup_norm = float(self.bound * (wnorm.max() ** 2))

    def eval(self, s: int, a: int, x: np.ndarray) -> float:
        return float(self.bound * np.cos(self.w[s, a] @ x + self.phase[s, a]))

    def grad_x(self, s: int, a: int, x: np.ndarray) -> np.ndarray:
        return -self.bound * np.sin(self.w[s, a] @ x + self.phase[s, a]) * self.w[s, a]

    def psi_point(self, x: np.ndarray) -> np.ndarray:
        return self.bound * np.cos(self.w @ x + self.phase)

    def grad_point(self, x: np.ndarray) -> np.ndarray:
        return -self.bound * np.sin(self.w @ x + self.phase)[:, :, None] * self.w

    def psi_batch(self, xs: np.ndarray) -> np.ndarray:
        args = np.einsum("sad,nd->nsa", self.w, xs) + self.phase[None, :, :]
        return self.bound * np.cos(args)

    def weighted_grad_sum(self, xs: np.ndarray, coeff: np.ndarray) -> np.ndarray:
        args = np.einsum("sad,nd->nsa", self.w, xs) + self.phase[None, :, :]
        return -self.bound * np.einsum("nsa,sa,sad->nd", np.sin(args), coeff, self.w)


FEATURE_REGISTRY = {
    "tabular-indicator": TabularIndicatorFeatures,
    "random-fourier": RandomFourierFeatures,
}


def make_features(key: str, n_states: int, n_actions: int, d: int, **kwargs) -> FeatureMap:
    if key not in FEATURE_REGISTRY:
        raise FeatureMapError(f"unknown feature map {key!r}; known: {sorted(FEATURE_REGISTRY)}")
    return FEATURE_REGISTRY[key](n_states=n_states, n_actions=n_actions, d=d, **kwargs)


def psi_norm(features: FeatureMap, order: int) -> float:
    """Declared Psi^{k,inf} norm: sum of derivative sup-norms up to the order."""
    if order > features.smoothness:
        raise FeatureMapError(f"feature map declares smoothness {features.smoothness} < {order}")
    total = features.sup_norm
    if order >= 1:
        total += features.grad_sup_norm
    if order >= 2:
        total += features.hess_sup_norm
    return float(total)


@dataclass
class ParticleEnsemble:
    """Uniform-weight empirical measure (1/N) sum_i delta_{x_i}."""

    x: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError("particles must form an (N, d) array with N >= 1")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("particle coordinates must be finite")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.x.copy())

    def to_dict(self, feature_key: str = "", seed: int | None = None) -> dict:
        return {
            "n": self.n, "d": self.d, "feature_key": feature_key, "seed": seed,
            "coords": self.x.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ParticleEnsemble":
        x = np.asarray(raw["coords"], dtype=float).reshape(raw["n"], raw["d"])
        return cls(x)


@dataclass
class PolicyEval:
    """Immutable snapshot of the softmax policy for one ensemble.

    dens is the density w.r.t. rho, masses = rho * dens the probabilities.
    """

    logits: np.ndarray     # (S, A)
    log_z: np.ndarray      # (S,)
    dens: np.ndarray       # (S, A)
    masses: np.ndarray     # (S, A)
    rho: np.ndarray


def policy_eval(ensemble: ParticleEnsemble, features: FeatureMap, rho: np.ndarray) -> PolicyEval:
    """Evaluate the softmax policy tables with log-sum-exp stabilization."""
    psi = features.psi_batch(ensemble.x)                 # (N, S, A)
    if not np.all(np.isfinite(psi)):
        bad = np.argwhere(~np.isfinite(psi))[0]
        raise FeatureMapError(
            f"non-finite feature value at particle={bad[0]}, state={bad[1]}, action={bad[2]}"
        )
    logits = psi.mean(axis=0)                            # (S, A)
    log_rho = np.log(rho)
    log_z = logsumexp(logits + log_rho[None, :], axis=1)  # (S,)
    dens = np.exp(logits - log_z[:, None])
    masses = rho[None, :] * dens
    return PolicyEval(logits=logits, log_z=log_z, dens=dens, masses=masses, rho=np.asarray(rho, float))


def sample_action(pe: PolicyEval, s: int, rng: np.random.Generator) -> int:
    return int(rng.choice(pe.masses.shape[1], p=pe.masses[s]))


def func_deriv_kernel(pe: PolicyEval, features: FeatureMap, s: int, x: np.ndarray) -> np.ndarray:
    """Per-action density of the policy's first variation at parameter point x.

    Zero total mass against rho by construction: sum_a rho(a) v(a) = 0.
    """
    psi = features.psi_point(x)[s]                       # (A,)
    centered = psi - pe.masses[s] @ psi
    return centered * pe.dens[s]


def grad_x_func_deriv(pe: PolicyEval, features: FeatureMap, s: int, x: np.ndarray) -> np.ndarray:
    """x-gradient of func_deriv_kernel: psi replaced by grad_x psi. Shape (A, d)."""
    g = features.grad_point(x)[s]                        # (A, d)
    centered = g - np.einsum("a,ad->d", pe.masses[s], g)[None, :]
    return centered * pe.dens[s][:, None]


def perturbed_dens(pe: PolicyEval, features: FeatureMap, x_new: np.ndarray, t: float) -> np.ndarray:
    """Density table of the policy for the mixture (1-t) mu + t delta_{x_new}.

    Exact mixture logits, used by tests as the finite-difference oracle for the
    first-variation kernel; not part of the flow's hot path.
    """
    logits = (1.0 - t) * pe.logits + t * features.psi_point(x_new)
    log_z = logsumexp(logits + np.log(pe.rho)[None, :], axis=1)
    return np.exp(logits - log_z[:, None])


def tv_distance(pe_a: PolicyEval, pe_b: PolicyEval) -> float:
    """Max over states of the total-variation distance between action laws."""
    return float(0.5 * np.abs(pe_a.masses - pe_b.masses).sum(axis=1).max())
