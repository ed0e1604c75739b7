"""Particle gradient flow for the doubly regularized control objective.

Assembles the descent field on parameter measures, minus the value gradient
plus the scaled divergence gradient, and integrates it with synchronized
explicit Euler steps over an empirical particle ensemble. The same module
houses the diagnostic program the experiments report: the discrete energy
identity, empirical Lipschitz and growth constants with their analytic
counterpart, convexity-modulus estimates, and exponential decay-rate fits
for the objective gap and the transport distance to the terminal ensemble.

The value gradient follows the first-variation route: per state and action,
a centered advantage built from the regularized state-action values weights
the feature gradients; contraction against the discounted visitation yields
the gradient field at any query point, not only at the particles.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mdp import truncate_reward
from .metrics import violation_rate, w1, w2
from .policy import (
    FeatureMap,
    FeatureMapError,
    ParticleEnsemble,
    make_features,
    policy_eval,
    psi_norm,
)
from .regularizers import (
    Mollifier,
    ParamRegularizer,
    ReferencePrior,
    RewardRegularizer,
    divergence_H_sigma,
    f_bound_constants,
    grad_H_sigma,
    grid_for_ensemble,
    make_prior,
    mollified_density,
)
from .values import (
    ScheduleStage,
    stationary_visitation,
    validate_schedule,
    value_n,
)

J_STAR_SLACK = 1e-9
ENERGY_DELTA_FLOOR = 1e-14
FIT_GAP_FLOOR = 1e-4
MIN_FIT_POINTS = 50


class FlowError(RuntimeError):
    """Raised when the flow integration or its diagnostics cannot proceed."""


@dataclass
class FlowConfig:
    """Staged flow run: schedule, integrator, ensemble, and model choices.

    steps_per_stage may be a single int (applied to every stage) or one
    count per stage. Regularizer exponents are forwarded only to variants
    that take them.
    """

    stages: list[ScheduleStage]
    h: float
    steps_per_stage: object
    n_particles: int
    dim: int
    feature_key: str = "random-fourier"
    feature_params: dict = field(default_factory=dict)
    reward_variant: str = "entropy"
    reward_power: float | None = None
    param_variant: str = "kl"
    param_m: float | None = None
    prior_key: str = "gaussian"
    env_key: str | None = None
    seed: int = 0
    entropy_fast_path: bool = False
    gh_order: int | None = None
    violation_sample_every: int = 0
    violation_rollouts: int = 200
    violation_horizon: int = 100

    def __post_init__(self) -> None:
        validate_schedule(self.stages)
        if self.h <= 0:
            raise FlowError("step size h must be positive")
        if isinstance(self.steps_per_stage, (int, np.integer)):
            self.steps_per_stage = tuple([int(self.steps_per_stage)] * len(self.stages))
        else:
            self.steps_per_stage = tuple(int(t) for t in self.steps_per_stage)
        if len(self.steps_per_stage) != len(self.stages):
            raise FlowError("need one step count per stage")
        if any(t < 0 for t in self.steps_per_stage):
            raise FlowError("step counts must be nonnegative")
        if self.n_particles < 1 or self.dim < 1:
            raise FlowError("ensemble needs n_particles >= 1 and dim >= 1")


def build_regularizers(
    config: FlowConfig,
) -> tuple[RewardRegularizer, ParamRegularizer, ReferencePrior]:
    reward = RewardRegularizer(variant=config.reward_variant, p=config.reward_power)
    param = ParamRegularizer(variant=config.param_variant, m=config.param_m)
    return reward, param, make_prior(config.prior_key)


@dataclass
class StepRecord:
    """One trace row; step counts records, time integrates h over updates."""

    step: int
    stage_index: int
    time: float
    objective: float
    value_part: float
    divergence_part: float
    grad_norm_sq: float
    w2_to_reference: float
    wall_time: float


@dataclass
class FlowTrace:
    """Per-step diagnostics plus particle snapshots, grouped by stage."""

    records: list[StepRecord]
    positions: np.ndarray
    h: float
    stage_bounds: list[tuple[int, int]]
    violation_samples: list[tuple[int, float]]
    seed: int
    aborted: bool = False
    abort_reason: str | None = None

    def stage_records(self, stage_index: int) -> list[StepRecord]:
        lo, hi = self.stage_bounds[stage_index]
        return self.records[lo:hi]

    def stage_positions(self, stage_index: int) -> np.ndarray:
        lo, hi = self.stage_bounds[stage_index]
        return self.positions[lo:hi]

    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    def final_ensemble(self) -> ParticleEnsemble:
        return ParticleEnsemble(x=self.positions[-1].copy())


@dataclass
class ObjectiveParts:
    """Objective J = -value + kappa * divergence, with both summands."""

    objective: float
    value: float
    divergence: float


def _m_table(
    pe,
    mdp,
    stage: ScheduleStage,
    reward_reg: RewardRegularizer,
    entropy_fast_path: bool,
) -> tuple[np.ndarray, object]:
    """Coefficient table turning feature gradients into the value gradient.

    M(s, a) = dvis(s)/(1 - beta) * mass(a|s) * (qbar(s, a) - mean_a qbar),
    where qbar subtracts eps * (F(dens) + dens * F'(dens)) from the Q table
    of the truncated reward with regularized continuation. The entropy fast
    path drops the F' correction, which the centering absorbs exactly
    because dens * F'(dens) = 1 for F = log.
    """
    if entropy_fast_path and reward_reg.variant != "entropy":
        raise FlowError("entropy fast path requires the entropy reward regularizer")
    f = reward_reg.f if stage.eps > 0 else None
    report = value_n(pe, mdp, stage, f)
    q_bar = report.q.copy()
    if stage.eps > 0:
        q_bar -= stage.eps * reward_reg.f(pe.dens)
        if not entropy_fast_path:
            q_bar -= stage.eps * pe.dens * reward_reg.f_prime(pe.dens)
    centered = q_bar - (pe.masses * q_bar).sum(axis=1, keepdims=True)
    vis = stationary_visitation(pe, mdp)
    table = (vis.d / (1.0 - mdp.beta))[:, None] * pe.masses * centered
    return table, report


def grad_v(
    ensemble: ParticleEnsemble,
    features: FeatureMap,
    mdp,
    stage: ScheduleStage,
    reward_reg: RewardRegularizer,
    x: np.ndarray | None = None,
    entropy_fast_path: bool = False,
) -> np.ndarray:
    """Gradient field of the value part at the query points.

    Defaults to the ensemble's own particles; a single point returns a
    single vector. The particle derivative of the value carries an extra
    1/N against this field.
    """
    pe = policy_eval(ensemble, features, mdp.rho)
    table, _ = _m_table(pe, mdp, stage, reward_reg, entropy_fast_path)
    single = x is not None and np.ndim(x) == 1
    xs = ensemble.x if x is None else np.atleast_2d(np.asarray(x, dtype=float))
    grads = features.weighted_grad_sum(xs, table)
    return grads[0] if single else grads


def grad_j(
    ensemble: ParticleEnsemble,
    features: FeatureMap,
    mdp,
    stage: ScheduleStage,
    reward_reg: RewardRegularizer,
    param_reg: ParamRegularizer | None = None,
    prior: ReferencePrior | None = None,
    x: np.ndarray | None = None,
    entropy_fast_path: bool = False,
    gh_order: int | None = None,
) -> np.ndarray:
    """Descent field -grad_v + kappa * smoothed divergence gradient."""
    gv = grad_v(ensemble, features, mdp, stage, reward_reg, x, entropy_fast_path)
    if stage.kappa == 0.0:
        return -gv
    if param_reg is None or prior is None:
        raise FlowError("kappa > 0 requires a parameter regularizer and prior")
    mollifier = Mollifier(stage.sigma)
    gh, _ = grad_H_sigma(
        ensemble, param_reg, prior, mollifier, x=x, variant="smoothed", gh_order=gh_order
    )
    single = x is not None and np.ndim(x) == 1
    return -gv + stage.kappa * (gh[0] if single else gh)


def objective(
    ensemble: ParticleEnsemble,
    features: FeatureMap,
    mdp,
    stage: ScheduleStage,
    reward_reg: RewardRegularizer,
    param_reg: ParamRegularizer | None = None,
    prior: ReferencePrior | None = None,
    quad_grid=None,
) -> ObjectiveParts:
    """Evaluate J = -value_n + kappa * divergence at the given ensemble.

    Passing an explicit quad_grid keeps the quadrature domain fixed across
    nearby ensembles, which finite-difference probes require.
    """
    pe = policy_eval(ensemble, features, mdp.rho)
    f = reward_reg.f if stage.eps > 0 else None
    report = value_n(pe, mdp, stage, f)
    if stage.kappa == 0.0:
        return ObjectiveParts(-report.value, report.value, 0.0)
    if param_reg is None or prior is None:
        raise FlowError("kappa > 0 requires a parameter regularizer and prior")
    mollifier = Mollifier(stage.sigma)
    if quad_grid is None:
        quad_grid = grid_for_ensemble(ensemble, mollifier, prior)
    div = divergence_H_sigma(ensemble, param_reg, prior, mollifier, quad_grid)
    return ObjectiveParts(-report.value + stage.kappa * div, report.value, div)


def euler_step(ensemble: ParticleEnsemble, grads: np.ndarray, h: float) -> ParticleEnsemble:
    """Synchronized update x_i' = x_i - h * grad_i off a frozen snapshot."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != ensemble.x.shape:
        raise FlowError(
            f"gradient shape {grads.shape} does not match ensemble {ensemble.x.shape}"
        )
    new_x = ensemble.x - h * grads
    finite = np.isfinite(new_x).all(axis=1)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise FlowError(f"non-finite update for particle {bad}")
    return ParticleEnsemble(x=new_x)


def derive_features(config: FlowConfig, mdp) -> FeatureMap:
    """The feature map a run of this config uses.

    Random-fourier maps without an explicit seed get one derived from the
    run seed, so a config fully determines the features.
    """
    seq = np.random.SeedSequence(config.seed)
    _, feat_seed, _ = seq.spawn(3)
    params = dict(config.feature_params)
    if config.feature_key == "random-fourier":
        params.setdefault("seed", int(feat_seed.generate_state(1)[0]))
    return make_features(
        config.feature_key, mdp.n_states, mdp.n_actions, config.dim, **params
    )


def run_flow(
    config: FlowConfig,
    mdp=None,
    features: FeatureMap | None = None,
    initial: ParticleEnsemble | None = None,
    reference: ParticleEnsemble | None = None,
) -> FlowTrace:
    """Integrate the staged flow, recording diagnostics each step.

    Within each stage the particle positions continue exactly; every stage
    contributes one snapshot record per step plus a closing record, so the
    energy identity can be checked per stage. On a non-finite update the
    partial trace is returned with the abort reason recorded.
    """
    reward_reg, param_reg, prior = build_regularizers(config)
    seq = np.random.SeedSequence(config.seed)
    init_seed, feat_seed, viol_seed = seq.spawn(3)
    if mdp is None:
        if config.env_key is None:
            raise FlowError("run_flow needs either an mdp or an env_key")
        from .envs import discretized_env

        mdp = discretized_env(config.env_key)
    if features is None:
        features = derive_features(config, mdp)
    if initial is None:
        rng_init = np.random.default_rng(init_seed)
        initial = ParticleEnsemble(x=prior.sample(config.n_particles, config.dim, rng_init))
    if reference is None:
        reference = initial.copy()
    viol_base = int(viol_seed.generate_state(1)[0])

    ens = initial.copy()
    records: list[StepRecord] = []
    positions: list[np.ndarray] = []
    violations: list[tuple[int, float]] = []
    stage_bounds: list[tuple[int, int]] = []
    euler_steps = 0
    aborted = False
    abort_reason = None
    clock_start = time.perf_counter()
    for k, stage in enumerate(config.stages):
        bound_lo = len(records)
        mollifier = Mollifier(stage.sigma) if stage.kappa > 0 else None
        try:
            for local_t in range(config.steps_per_stage[k] + 1):
                pe = policy_eval(ens, features, mdp.rho)
                table, report = _m_table(
                    pe, mdp, stage, reward_reg, config.entropy_fast_path
                )
                gv = features.weighted_grad_sum(ens.x, table)
                div = 0.0
                if stage.kappa > 0:
                    grid = grid_for_ensemble(ens, mollifier, prior)
                    div = divergence_H_sigma(ens, param_reg, prior, mollifier, grid)
                    gh, _ = grad_H_sigma(
                        ens, param_reg, prior, mollifier, gh_order=config.gh_order
                    )
                    gj = -gv + stage.kappa * gh
                else:
                    gj = -gv
                finite_rows = np.isfinite(gj).all(axis=1)
                if not finite_rows.all():
                    bad = int(np.argmin(finite_rows))
                    raise FlowError(f"non-finite gradient for particle {bad}")
                gn2 = float(np.mean(np.sum(gj * gj, axis=1)))
                obj = -report.value + stage.kappa * div
                records.append(
                    StepRecord(
                        step=len(records),
                        stage_index=k,
                        time=euler_steps * config.h,
                        objective=obj,
                        value_part=-report.value,
                        divergence_part=stage.kappa * div,
                        grad_norm_sq=gn2,
                        w2_to_reference=w2(ens.x, reference.x),
                        wall_time=time.perf_counter() - clock_start,
                    )
                )
                positions.append(ens.x.copy())
                if (
                    config.violation_sample_every > 0
                    and euler_steps % config.violation_sample_every == 0
                    and local_t < config.steps_per_stage[k]
                ):
                    rng = np.random.default_rng([viol_base, euler_steps])
                    sample = violation_rate(
                        ens,
                        features,
                        mdp,
                        config.violation_rollouts,
                        config.violation_horizon,
                        rng,
                    )
                    violations.append((len(records) - 1, sample.rate))
                if local_t == config.steps_per_stage[k]:
                    break
                ens = euler_step(ens, gj, config.h)
                euler_steps += 1
        except (FlowError, FeatureMapError) as err:
            aborted = True
            abort_reason = str(err)
            stage_bounds.append((bound_lo, len(records)))
            break
        stage_bounds.append((bound_lo, len(records)))
    return FlowTrace(
        records=records,
        positions=np.array(positions),
        h=config.h,
        stage_bounds=stage_bounds,
        violation_samples=violations,
        seed=config.seed,
        aborted=aborted,
        abort_reason=abort_reason,
    )


def energy_residual(trace: FlowTrace, stage_index: int = 0) -> float:
    """Relative defect of the discrete energy identity over one stage.

    |delta J + h * sum of grad norms| / |delta J| using left-endpoint
    snapshots; nan signals an indeterminate residual (|delta J| < 1e-14).
    """
    recs = trace.stage_records(stage_index)
    if len(recs) < 2:
        raise FlowError("stage has no steps to integrate")
    delta = recs[-1].objective - recs[0].objective
    dissipated = trace.h * sum(r.grad_norm_sq for r in recs[:-1])
    if abs(delta) < ENERGY_DELTA_FLOOR:
        return float("nan")
    return abs(delta + dissipated) / abs(delta)


@dataclass
class LipschitzEstimate:
    """Empirical regularity constants with the analytic comparison bound."""

    c_v: float
    k_v: float
    m_growth: float
    probes: int
    c_v_analytic: float
    l_field: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.c_v, self.k_v, self.m_growth, self.c_v_analytic, self.l_field)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise FlowError("regularity estimates must be finite and nonnegative")


def analytic_c_v_bound(mdp, features: FeatureMap, stage: ScheduleStage,
                       reward_reg: RewardRegularizer) -> float:
    """Closed-form spatial Lipschitz bound for the value gradient field.

    4 / (1 - beta)^2 times (reward scale + eps (C0 + C1)) times the declared
    feature norm through second derivatives, with the reward scale covering
    the truncated table plus eps C0 and the F-derivative sups taken over the
    achievable density interval.
    """
    s = features.sup_norm
    lo = np.exp(-2.0 * s) / mdp.rho_total
    hi = np.exp(2.0 * s) / mdp.rho_total
    c0, c1, _ = f_bound_constants(reward_reg, lo, hi)
    u_norm = float(np.abs(truncate_reward(mdp.u_b, stage.m)).max())
    c_n = u_norm + stage.eps * c0
    return (
        4.0
        / (1.0 - mdp.beta) ** 2
        * (c_n + stage.eps * (c0 + c1))
        * psi_norm(features, 2)
    )


def estimate_lipschitz(
    mdp,
    features: FeatureMap,
    stage: ScheduleStage,
    reward_reg: RewardRegularizer,
    param_reg: ParamRegularizer | None = None,
    prior: ReferencePrior | None = None,
    probes: int = 32,
    rng: np.random.Generator | int = 0,
    n_particles: int = 16,
    box_radius: float | None = None,
    entropy_fast_path: bool = False,
) -> LipschitzEstimate:
    """Max-ratio probes for C_V, K_V, and the growth constant M.

    Each probe draws a fresh ensemble, compares the value gradient between
    random points in the box (C_V), against a perturbed ensemble at the
    same points normalized by their W1 distance (K_V), and measures the
    full descent field against 1 + |x| (M). The same probes applied to the
    full field give l_field, the step-size gate for explicit Euler: the sum
    of the worst spatial ratio and the worst measure-shift ratio of the
    descent field. Estimates only grow with more probes.
    """
    if probes < 2:
        raise FlowError("need at least 2 probes")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    d = features.d
    radius = box_radius
    if radius is None:
        radius = prior.coverage_radius if prior is not None else 4.0
    c_v = 0.0
    k_v = 0.0
    m_growth = 0.0
    l_spatial = 0.0
    l_shift = 0.0
    for _ in range(probes):
        if prior is not None:
            xs = prior.sample(n_particles, d, gen)
        else:
            xs = gen.normal(size=(n_particles, d))
        ens = ParticleEnsemble(x=xs)
        points = gen.uniform(-radius, radius, size=(4, d))
        gv = grad_v(ens, features, mdp, stage, reward_reg, points, entropy_fast_path)
        for i in range(len(points)):
            for j in range(i + 1, len(points)):
                gap = float(np.linalg.norm(points[i] - points[j]))
                if gap > 1e-12:
                    ratio = float(np.linalg.norm(gv[i] - gv[j])) / gap
                    c_v = max(c_v, ratio)
        scale = gen.uniform(0.02, 0.5)
        other = ParticleEnsemble(x=xs + gen.normal(scale=scale, size=xs.shape))
        gv_other = grad_v(
            other, features, mdp, stage, reward_reg,
            x=points, entropy_fast_path=entropy_fast_path,
        )
        w_gap = w1(xs, other.x)
        if w_gap > 1e-12:
            sup_diff = float(np.linalg.norm(gv_other - gv, axis=1).max())
            k_v = max(k_v, sup_diff / w_gap)
        if stage.kappa > 0 and (param_reg is None or prior is None):
            raise FlowError("kappa > 0 requires a parameter regularizer and prior")
        gj = grad_j(
            ens, features, mdp, stage, reward_reg, param_reg, prior,
            x=points, entropy_fast_path=entropy_fast_path,
        )
        rows = np.linalg.norm(gj, axis=1) / (1.0 + np.linalg.norm(points, axis=1))
        m_growth = max(m_growth, float(rows.max()))
        for i in range(len(points)):
            for j in range(i + 1, len(points)):
                gap = float(np.linalg.norm(points[i] - points[j]))
                if gap > 1e-12:
                    l_spatial = max(
                        l_spatial, float(np.linalg.norm(gj[i] - gj[j])) / gap
                    )
        if w_gap > 1e-12:
            gj_other = grad_j(
                other, features, mdp, stage, reward_reg, param_reg, prior,
                x=points, entropy_fast_path=entropy_fast_path,
            )
            l_shift = max(
                l_shift, float(np.linalg.norm(gj_other - gj, axis=1).max()) / w_gap
            )
    return LipschitzEstimate(
        c_v=c_v,
        k_v=k_v,
        m_growth=m_growth,
        probes=probes,
        c_v_analytic=analytic_c_v_bound(mdp, features, stage, reward_reg),
        l_field=l_spatial + l_shift,
    )


def lambda_j(kappa: float, lambda_h: float, c_v: float, k_v: float) -> float:
    """Convexity margin kappa * lambda_H - C_V - K_V of the full objective."""
    return kappa * lambda_h - c_v - k_v


def estimate_lambda_h(
    ensemble: ParticleEnsemble,
    param_reg: ParamRegularizer,
    prior: ReferencePrior,
    mollifier: Mollifier,
) -> float:
    """Empirical convexity modulus of the smoothed divergence.

    lambda_U times the minimum of L_H' at the mollified likelihood ratios
    over the ensemble; identically lambda_U for the kl variant.
    """
    rho_vals, _ = mollified_density(ensemble, mollifier, ensemble.x)
    ratio = np.asarray(rho_vals) * np.exp(prior.u(ensemble.x))
    return float(prior.lambda_u * np.min(param_reg.l_h_prime(ratio)))


def _line_fit(ts: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    slope, intercept = np.polyfit(ts, ys, 1)
    pred = slope * ts + intercept
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 if ss_tot < 1e-30 else 1.0 - ss_res / ss_tot
    return float(slope), r2


@dataclass
class DecayFit:
    """Exponential-rate fits for the objective gap and W2 to the end state."""

    rate_j: float
    r2_j: float
    rate_w2: float
    r2_w2: float
    j_star: float
    n_points_j: int
    n_points_w2: int
    tail_monotone: bool


@dataclass
class LambdaReport:
    """Convexity accounting: modulus pieces and the fitted decay evidence."""

    kappa: float
    lambda_h: float
    c_v: float
    k_v: float
    l_field: float = 0.0
    fit: DecayFit | None = None

    @property
    def lambda_j(self) -> float:
        return lambda_j(self.kappa, self.lambda_h, self.c_v, self.k_v)


def fit_decay(trace: FlowTrace, burn_in: int, stage_index: int | None = None) -> DecayFit:
    """Least-squares decay rates after burn-in within one stage.

    J* is the stage minimum plus a 1e-9 slack; points whose gap or W2 falls
    under 1e-4 of its post-burn-in start are dropped, as is the terminal
    W2 point, which is zero by construction. A non-monotone objective tail
    is flagged rather than rejected.
    """
    k = stage_index if stage_index is not None else len(trace.stage_bounds) - 1
    recs = trace.stage_records(k)
    pos = trace.stage_positions(k)
    if burn_in < 0 or len(recs) - burn_in < MIN_FIT_POINTS:
        raise FlowError(
            f"need at least {MIN_FIT_POINTS} records after burn-in, have {len(recs) - burn_in}"
        )
    recs = recs[burn_in:]
    pos = pos[burn_in:]
    ts = np.array([r.time for r in recs])
    js = np.array([r.objective for r in recs])
    j_star = float(js.min()) + J_STAR_SLACK
    gaps = js - j_star
    keep_j = gaps >= FIT_GAP_FLOOR * gaps[0]
    if keep_j.sum() < 10:
        raise FlowError("objective gap collapses too quickly to fit")
    slope_j, r2_j = _line_fit(ts[keep_j], np.log(gaps[keep_j]))
    final = pos[-1]
    w2s = np.array([w2(p, final) for p in pos])
    keep_w = (w2s >= FIT_GAP_FLOOR * max(w2s[0], 1e-300)) & (np.arange(len(w2s)) < len(w2s) - 1)
    if keep_w.sum() < 10:
        raise FlowError("W2 to the final ensemble collapses too quickly to fit")
    slope_w, r2_w = _line_fit(ts[keep_w], np.log(w2s[keep_w]))
    tail_monotone = bool(np.all(np.diff(js) <= 1e-10))
    return DecayFit(
        rate_j=-slope_j,
        r2_j=r2_j,
        rate_w2=-slope_w,
        r2_w2=r2_w,
        j_star=j_star,
        n_points_j=int(keep_j.sum()),
        n_points_w2=int(keep_w.sum()),
        tail_monotone=tail_monotone,
    )
