"""Reward regularizers, likelihood-ratio divergences, and their smoothed forms.

The parameter-measure regularizer is a divergence between the mollified
ensemble density and a log-concave reference with potential U: the functional
integrates H(rho_sigma(x) e^{U(x)}) e^{-U(x)} over a tensor quadrature grid.
Its particle gradient has two implementations. The "smoothed" variant is the
exact gradient of the quadrature functional with respect to a particle
coordinate (up to the 1/N scaling): a Gauss-Hermite average of H'(ratio)
against the mollifier offset. The "bare" variant is the classical blob field
L_H'(ratio) (grad log rho_sigma + grad U), kept for diagnostics; it is not the
exact gradient of the discretized functional and fails finite-difference
checks against it, which is why the smoothed variant is the default and the
one the descent loop uses.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.integrate import quad
from scipy.special import gammaln

from .mdp import MdpValidationError
from .policy import ParticleEnsemble

DENSITY_UNDERFLOW = 1e-300
BOUNDARY_MASS_TOL = 1e-8
QUADRATURE_MAX_DIM = 2
GH_ORDER_BY_DIM = {1: 48, 2: 24, 3: 12}


class RegularizerError(ValueError):
    pass


@dataclass
class RewardRegularizer:
    """Convex reward regularizer F acting on action densities.

    Variants: "entropy" (F = log) and "power" with exponent p > 1,
    F(z) = (z^(p-1) - 1)/(p - 1). Both make z F(z) convex with F unbounded
    above and z F(z) -> 0 at zero.
    """

    variant: str
    p: float | None = None

    def __post_init__(self) -> None:
        if self.variant == "entropy":
            if self.p is not None:
                raise RegularizerError("entropy variant takes no exponent")
        elif self.variant == "power":
            if self.p is None or self.p <= 1:
                raise RegularizerError("power variant needs exponent p > 1")
        else:
            raise RegularizerError(f"unknown reward regularizer {self.variant!r}")

    def _check_domain(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0):
            raise RegularizerError("F is defined on positive densities only")
        return z

    def f(self, z):
        z = self._check_domain(z)
        if self.variant == "entropy":
            return np.log(z)
        return (z ** (self.p - 1) - 1.0) / (self.p - 1.0)

    def f_prime(self, z):
        z = self._check_domain(z)
        if self.variant == "entropy":
            return 1.0 / z
        return z ** (self.p - 2.0)

    def f_pprime(self, z):
        z = self._check_domain(z)
        if self.variant == "entropy":
            return -1.0 / z**2
        return (self.p - 2.0) * z ** (self.p - 3.0)


def f_bound_constants(reg: RewardRegularizer, lo: float, hi: float) -> tuple[float, float, float]:
    """Sup of |F|, |F'|, |F''| over [lo, hi], for tail and smoothness bounds.

    The shipped variants have monotone derivative magnitudes, so a fine grid
    including both endpoints captures the suprema exactly.
    """
    if not (0 < lo <= hi):
        raise RegularizerError("need 0 < lo <= hi")
    grid = np.geomspace(lo, hi, 4097)
    return (
        float(np.abs(reg.f(grid)).max()),
        float(np.abs(reg.f_prime(grid)).max()),
        float(np.abs(reg.f_pprime(grid)).max()),
    )


@dataclass
class ParamRegularizer:
    """Divergence integrand H on likelihood ratios, with its Legendre pieces.

    Variants: "kl" uses the normalized H(u) = u log u - u + 1 (pointwise
    nonnegative, same gradient field as u log u); "m_entropy" uses the
    Bregman-normalized H(u) = (u^m - m u + m - 1)/(m (m - 1)) for m > 0,
    m != 1. L_H(u) = u H'(u) - H(u) and its derivative L_H'(u) = u H''(u)
    drive the gradient formulas.
    """

    variant: str
    m: float | None = None

    def __post_init__(self) -> None:
        if self.variant == "kl":
            if self.m is not None:
                raise RegularizerError("kl variant takes no order m")
        elif self.variant == "m_entropy":
            if self.m is None or self.m <= 0 or self.m == 1.0:
                raise RegularizerError("m_entropy needs m > 0, m != 1 (m = 1 is kl)")
        else:
            raise RegularizerError(f"unknown param regularizer {self.variant!r}")

    def h(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u < 0):
            raise RegularizerError("H is defined on nonnegative ratios")
        if self.variant == "kl":
            with np.errstate(divide="ignore", invalid="ignore"):
                vals = np.where(u > 0, u * np.log(np.where(u > 0, u, 1.0)) - u + 1.0, 1.0)
            return vals
        m = self.m
        return (u**m - m * u + m - 1.0) / (m * (m - 1.0))

    def h_prime(self, u):
        u = np.asarray(u, dtype=float)
        if self.variant == "kl":
            with np.errstate(divide="ignore"):
                return np.log(u)
        return (u ** (self.m - 1.0) - 1.0) / (self.m - 1.0)

    def h_pprime(self, u):
        u = np.asarray(u, dtype=float)
        if self.variant == "kl":
            return 1.0 / u
        return u ** (self.m - 2.0)

    def l_h(self, u):
        u = np.asarray(u, dtype=float)
        if self.variant == "kl":
            return u - 1.0
        return (u**self.m - 1.0) / self.m

    def l_h_prime(self, u):
        u = np.asarray(u, dtype=float)
        if self.variant == "kl":
            return np.ones_like(u)
        return u ** (self.m - 1.0)


@dataclass
class ReferencePrior:
    """Log-concave reference gamma = exp(-U) dx with declared convexity.

    coverage_radius bounds the region holding all but a negligible share of
    gamma's mass; quadrature grids must cover it because the divergence
    integrand does not vanish where the ensemble density does.
    """

    key: str
    u_fn: Callable[[np.ndarray], np.ndarray]
    grad_u_fn: Callable[[np.ndarray], np.ndarray]
    lambda_u: float
    coverage_radius: float
    sampler: Callable[[int, int, np.random.Generator], np.ndarray]

    def u(self, pts: np.ndarray) -> np.ndarray:
        return self.u_fn(np.atleast_2d(np.asarray(pts, dtype=float)))

    def grad_u(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        out = self.grad_u_fn(np.atleast_2d(pts))
        return out[0] if single else out

    def sample(self, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
        return self.sampler(n, d, rng)


def _gaussian_prior() -> ReferencePrior:
    def u_fn(pts):
        d = pts.shape[1]
        return 0.5 * (pts**2).sum(axis=1) + 0.5 * d * np.log(2.0 * np.pi)

    def grad_u_fn(pts):
        return pts.copy()

    def sampler(n, d, rng):
        return rng.normal(size=(n, d))

    return ReferencePrior(
        key="gaussian",
        u_fn=u_fn,
        grad_u_fn=grad_u_fn,
        lambda_u=1.0,
        coverage_radius=6.0,
        sampler=sampler,
    )


def _quartic_log_normalizer(d: int) -> float:
    # radial integral of exp(-r^4/4 - r^2/2) times the sphere area
    radial, _ = quad(lambda r: r ** (d - 1) * np.exp(-0.25 * r**4 - 0.5 * r**2), 0, 12)
    log_sphere = np.log(2.0) + 0.5 * d * np.log(np.pi) - gammaln(0.5 * d)
    return float(log_sphere + np.log(radial)) if d > 1 else float(np.log(2.0 * radial))


def _quartic_prior(d_hint: int = 1) -> ReferencePrior:
    log_z_cache: dict[int, float] = {}

    def log_z(d):
        if d not in log_z_cache:
            log_z_cache[d] = _quartic_log_normalizer(d)
        return log_z_cache[d]

    def u_fn(pts):
        d = pts.shape[1]
        sq = (pts**2).sum(axis=1)
        return 0.25 * sq**2 + 0.5 * sq + log_z(d)

    def grad_u_fn(pts):
        sq = (pts**2).sum(axis=1)
        return pts * (sq + 1.0)[:, None]

    def sampler(n, d, rng):
        # gamma density is exp(-|x|^4/4) times the Gaussian, so rejection
        # from the Gaussian with acceptance exp(-|x|^4/4) is exact
        out = np.empty((0, d))
        while out.shape[0] < n:
            cand = rng.normal(size=(2 * n, d))
            sq = (cand**2).sum(axis=1)
            keep = rng.random(2 * n) < np.exp(-0.25 * sq**2)
            out = np.vstack([out, cand[keep]])
        return out[:n]

    return ReferencePrior(
        key="quartic",
        u_fn=u_fn,
        grad_u_fn=grad_u_fn,
        lambda_u=1.0,
        coverage_radius=4.0,
        sampler=sampler,
    )


PRIOR_REGISTRY: dict[str, Callable[[], ReferencePrior]] = {
    "gaussian": _gaussian_prior,
    "quartic": _quartic_prior,
}


def make_prior(key: str) -> ReferencePrior:
    if key not in PRIOR_REGISTRY:
        raise RegularizerError(f"unknown prior {key!r}; known: {sorted(PRIOR_REGISTRY)}")
    return PRIOR_REGISTRY[key]()


@dataclass
class Mollifier:
    """Isotropic Gaussian kernel with variance parameter sigma."""

    sigma: float

    def __post_init__(self) -> None:
        if not (self.sigma > 0):
            raise RegularizerError("mollifier width must be positive")

    def log_kernel(self, diff: np.ndarray) -> np.ndarray:
        d = diff.shape[-1]
        return -0.5 * (diff**2).sum(axis=-1) / self.sigma - 0.5 * d * np.log(
            2.0 * np.pi * self.sigma
        )

    def kernel(self, diff: np.ndarray) -> np.ndarray:
        return np.exp(self.log_kernel(diff))

    def grad_kernel(self, diff: np.ndarray) -> np.ndarray:
        return -diff / self.sigma * self.kernel(diff)[..., None]

    @property
    def hess_diag_bound(self) -> float:
        # |d^2 eta / dy_j^2| peaks at the origin where it equals eta(0)/sigma
        d_ref = 1
        return float((2.0 * np.pi * self.sigma) ** (-0.5 * d_ref) / self.sigma)


def mollified_density(
    ensemble: ParticleEnsemble, mollifier: Mollifier, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Kernel density rho_sigma and its spatial gradient at the query points."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    diff = pts[:, None, :] - ensemble.x[None, :, :]
    k = mollifier.kernel(diff)
    rho = k.mean(axis=1)
    grad = (-diff / mollifier.sigma * k[:, :, None]).mean(axis=1)
    if single:
        return float(rho[0]), grad[0]
    return rho, grad


def _log_mollified_density(
    ensemble: ParticleEnsemble, mollifier: Mollifier, pts: np.ndarray
) -> np.ndarray:
    from scipy.special import logsumexp

    diff = pts[:, None, :] - ensemble.x[None, :, :]
    logs = mollifier.log_kernel(diff)
    return logsumexp(logs, axis=1) - np.log(ensemble.n)


@dataclass
class QuadratureGrid:
    """Static tensor grid with particle-independent snapped bounds."""

    axes: list[np.ndarray]
    step: float

    @property
    def d(self) -> int:
        return len(self.axes)

    @property
    def cell_volume(self) -> float:
        return float(self.step**self.d)

    @property
    def n_points(self) -> int:
        return int(np.prod([len(a) for a in self.axes]))

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def boundary_mask(self) -> np.ndarray:
        shape = tuple(len(a) for a in self.axes)
        mask = np.zeros(shape, dtype=bool)
        for axis in range(len(shape)):
            sl_lo = [slice(None)] * len(shape)
            sl_hi = [slice(None)] * len(shape)
            sl_lo[axis] = 0
            sl_hi[axis] = -1
            mask[tuple(sl_lo)] = True
            mask[tuple(sl_hi)] = True
        return mask.ravel()


def build_quad_grid(
    lo: np.ndarray,
    hi: np.ndarray,
    mollifier: Mollifier,
    prior: ReferencePrior | None = None,
    step: float | None = None,
) -> QuadratureGrid:
    """Tensor grid covering [lo, hi] padded by 6 sqrt(sigma) and the prior.

    Bounds snap outward to multiples of the step so that small movements of
    the underlying particles cannot shift the grid; finite-difference oracles
    rely on this bound stability.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    d = lo.size
    if d > QUADRATURE_MAX_DIM:
        raise RegularizerError(
            f"tensor quadrature supports d <= {QUADRATURE_MAX_DIM}, got d = {d}"
        )
    if step is None:
        step = min(mollifier.sigma / 2.0, np.sqrt(mollifier.sigma) / 6.0)
    pad = 6.0 * np.sqrt(mollifier.sigma)
    lo = lo - pad
    hi = hi + pad
    if prior is not None:
        lo = np.minimum(lo, -prior.coverage_radius)
        hi = np.maximum(hi, prior.coverage_radius)
    axes = []
    for j in range(d):
        a = np.floor(lo[j] / step) * step
        b = np.ceil(hi[j] / step) * step
        n = int(round((b - a) / step)) + 1
        axes.append(a + step * np.arange(n))
    return QuadratureGrid(axes=axes, step=float(step))


def grid_for_ensemble(
    ensemble: ParticleEnsemble,
    mollifier: Mollifier,
    prior: ReferencePrior,
    step: float | None = None,
) -> QuadratureGrid:
    return build_quad_grid(
        ensemble.x.min(axis=0), ensemble.x.max(axis=0), mollifier, prior, step
    )


def divergence_H_sigma(
    ensemble: ParticleEnsemble,
    param_reg: ParamRegularizer,
    prior: ReferencePrior,
    mollifier: Mollifier,
    quad_grid: QuadratureGrid,
    chunk: int = 65536,
) -> float:
    """Quadrature value of the smoothed divergence against the prior.

    Integrates H(rho_sigma e^U) e^(-U) over the grid; the integrand is
    pointwise nonnegative for both shipped variants, so the value is too.
    Emits a warning when the ensemble density leaves visible mass on the
    grid boundary, which signals insufficient coverage.
    """
    pts = quad_grid.points()
    total = 0.0
    boundary = quad_grid.boundary_mask()
    boundary_mass = 0.0
    for start in range(0, pts.shape[0], chunk):
        block = pts[start : start + chunk]
        log_rho = _log_mollified_density(ensemble, mollifier, block)
        u_vals = prior.u(block)
        with np.errstate(over="ignore"):
            ratio = np.exp(log_rho + u_vals)
        h_vals = param_reg.h(ratio)
        total += float((h_vals * np.exp(-u_vals)).sum())
        bmask = boundary[start : start + chunk]
        if bmask.any():
            boundary_mass += float(np.exp(log_rho[bmask]).sum())
    boundary_mass *= quad_grid.cell_volume
    if boundary_mass > BOUNDARY_MASS_TOL:
        warnings.warn(
            f"ensemble density mass {boundary_mass:.2e} on the quadrature boundary; "
            "grid coverage is insufficient",
            RuntimeWarning,
            stacklevel=2,
        )
    return total * quad_grid.cell_volume


def _gh_offsets(d: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = hermegauss(order)
    weights = weights / np.sqrt(2.0 * np.pi)
    if d == 1:
        return nodes[:, None], weights
    grids = np.meshgrid(*([nodes] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wg = np.meshgrid(*([weights] * d), indexing="ij")
    w = np.prod(np.stack([g.ravel() for g in wg], axis=1), axis=1)
    return pts, w


def grad_H_sigma(
    ensemble: ParticleEnsemble,
    param_reg: ParamRegularizer,
    prior: ReferencePrior,
    mollifier: Mollifier,
    x: np.ndarray | None = None,
    variant: str = "smoothed",
    gh_order: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient field of the smoothed divergence at the query points.

    Returns (grads, underflow_flags). The default "smoothed" variant is the
    exact particle gradient of the quadrature functional (scaled by N): a
    Gauss-Hermite average of H'(ratio) times the mollifier offset direction,
    evaluated gridlessly. The "bare" variant is the blob field
    L_H'(ratio) (grad log rho_sigma + grad U); it is a diagnostic only.
    """
    pts = ensemble.x if x is None else np.atleast_2d(np.asarray(x, dtype=float))
    single = x is not None and np.asarray(x).ndim == 1
    d = pts.shape[1]
    if variant == "bare":
        rho, grad_rho = mollified_density(ensemble, mollifier, pts)
        rho = np.atleast_1d(rho)
        grad_rho = np.atleast_2d(grad_rho)
        under = rho < DENSITY_UNDERFLOW
        safe_rho = np.where(under, 1.0, rho)
        log_rho = np.log(safe_rho)
        with np.errstate(over="ignore"):
            ratio = np.exp(np.where(under, 0.0, log_rho + prior.u(pts)))
        field = param_reg.l_h_prime(ratio)[:, None] * (
            grad_rho / safe_rho[:, None] + prior.grad_u(pts)
        )
        field[under] = 0.0
    elif variant == "smoothed":
        order = gh_order if gh_order is not None else GH_ORDER_BY_DIM.get(d, 8)
        offsets, weights = _gh_offsets(d, order)
        sq = np.sqrt(mollifier.sigma)
        nodes = pts[:, None, :] + sq * offsets[None, :, :]     # (M, Q, d)
        flat = nodes.reshape(-1, d)
        log_rho = _log_mollified_density(ensemble, mollifier, flat)
        under_nodes = log_rho < np.log(DENSITY_UNDERFLOW)
        log_rho = np.maximum(log_rho, np.log(DENSITY_UNDERFLOW))
        log_ratio = log_rho + prior.u(flat)
        if param_reg.variant == "kl":
            h_prime = log_ratio
        else:
            with np.errstate(over="ignore"):
                h_prime = param_reg.h_prime(np.exp(log_ratio))
        h_prime = h_prime.reshape(pts.shape[0], -1)
        field = np.einsum("mq,q,qd->md", h_prime, weights, offsets) / sq
        under = under_nodes.reshape(pts.shape[0], -1).any(axis=1)
        field[under] = 0.0
    else:
        raise RegularizerError(f"unknown gradient variant {variant!r}")
    if single:
        return field[0], under[0]
    return field, under


def m_entropy_eval(
    rho_vals: np.ndarray, gamma_vals: np.ndarray, cell_volume: float, m: float
) -> float:
    """Bregman m-relative entropy between two densities on a shared grid.

    (1/(m(m-1))) * integral of rho^m - m rho gamma^(m-1) + (m-1) gamma^m;
    nonnegative, zero iff the densities agree almost everywhere.
    """
    if m == 1.0 or m <= 0:
        raise RegularizerError("m = 1 is the KL case; m must be positive and != 1")
    rho = np.asarray(rho_vals, dtype=float)
    gam = np.asarray(gamma_vals, dtype=float)
    if rho.shape != gam.shape:
        raise RegularizerError("densities must share the grid")
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = rho**m - m * rho * gam ** (m - 1.0) + (m - 1.0) * gam**m
    return float(integrand.sum() * cell_volume / (m * (m - 1.0)))
