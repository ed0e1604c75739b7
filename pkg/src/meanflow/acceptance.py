"""Acceptance suite: every headline claim of the package, measured at desk scale.

Ten criteria cover the stack bottom-up: budget bookkeeping, transport
metrics, the divergence quadrature, policy-layer identities, gradient
correctness, the discrete energy identity, monotone descent, exponential
convergence under strong regularization, staged approach to the
unregularized safe optimum, and terminal safety. Criteria that need full
experiment traces share one sweep of the shipped configurations; the rest
probe the library directly with frozen seeds. Each criterion reports the
numbers it measured, so a failure is diagnosable from the report alone.
"""

from __future__ import annotations

import itertools
import json
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .envs import discretized_env, make_env
from .flow import (
    FlowConfig,
    build_regularizers,
    derive_features,
    energy_residual,
    grad_j,
    objective,
    run_flow,
)
from .harness import RunArtifacts, read_trace, run_experiment
from .mdp import constraint_satisfied_direct, rollout
from .metrics import violation_rate, w2, w_p_1d, w_p_assignment
from .policy import (
    ParticleEnsemble,
    func_deriv_kernel,
    grad_x_func_deriv,
    make_features,
    policy_eval,
    psi_norm,
)
from .regularizers import (
    Mollifier,
    ParamRegularizer,
    RewardRegularizer,
    divergence_H_sigma,
    grad_H_sigma,
    grid_for_ensemble,
    m_entropy_eval,
    make_prior,
    mollified_density,
)
from .values import ScheduleStage, dp_optimal, value_n

GRAD_REL_TOL = 1e-3
GRAD_FD_STEP = 1e-5
GRAD_MIN_PROBES = 50
GRAD_BUDGET_S = 120.0
ENERGY_RESIDUAL_MAX = 0.10
ENERGY_ORDER_MIN = 0.8
ENERGY_BUDGET_S = 300.0
STRONG_BUDGET_S = 600.0
TWO_INIT_W2_MAX = 0.05
EPI_GAP_MAX = 0.05
EPI_BUDGET_S = 600.0
VIOLATION_MAX = 1e-3
VIOLATION_ROLLOUTS = 10_000
VIOLATION_HORIZON = 100
IDENTITY_DRAWS = 1000
TRANSPORT_TRIALS = 100
BUDGET_TRAJECTORIES = 1000

EPI_TRUNCATIONS = (1.0, 2.0, 5.0, 10.0)
EPI_PENALTIES = (0.1, 0.05, 0.02, 0.01)

RUN_PLAN = (
    ("chain-strong-a", "safe-chain-strong.json", None, None),
    ("chain-strong-b", "safe-chain-strong.json", 1, None),
    ("resource-strong-a", "safe-resource-strong.json", None, None),
    ("resource-strong-b", "safe-resource-strong.json", 1, None),
    ("chain-epi", "safe-chain-epi.json", None, None),
    ("resource-epi", "safe-resource-epi.json", None, None),
    ("chain-epi-nobarrier", "safe-chain-epi.json", None, {"barrier_scale": 0.0}),
)

SHIPPED_RUN_LABELS = (
    "chain-strong-a",
    "chain-strong-b",
    "resource-strong-a",
    "resource-strong-b",
    "chain-epi",
    "resource-epi",
)


@dataclass
class CriterionResult:
    """Outcome of one acceptance criterion with its raw measurements."""

    index: int
    name: str
    passed: bool
    measured: dict
    runtime_s: float


@dataclass
class ShippedRun:
    label: str
    config: ExperimentConfig
    artifacts: RunArtifacts
    trace: object
    wall_s: float

    @property
    def verdicts(self) -> dict:
        return self.artifacts.summary["verdicts"]


@dataclass
class AcceptanceReport:
    """All criterion results plus the experiment sweep that backed them."""

    results: list
    run_status: dict
    config_dir: str
    out_root: str
    total_s: float

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)

    def criterion(self, index: int) -> CriterionResult:
        for r in self.results:
            if r.index == index:
                return r
        raise KeyError(f"no criterion with index {index}")

    def to_dict(self) -> dict:
        return {
            "all_passed": self.all_passed,
            "config_dir": self.config_dir,
            "out_root": self.out_root,
            "total_s": self.total_s,
            "run_status": dict(self.run_status),
            "results": [
                {
                    "index": r.index,
                    "name": r.name,
                    "passed": r.passed,
                    "runtime_s": r.runtime_s,
                    "measured": _jsonable(r.measured),
                }
                for r in self.results
            ],
        }


def _jsonable(obj):
    """Recursively convert numpy scalars and arrays for json.dumps."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


# ---------------------------------------------------------------------------
# Criterion 1: analytic descent field vs central finite differences.


def _fd_probe_ensemble(mdp, features, stage, regs, ensemble, hook):
    """Max relative FD error over every coordinate of one ensemble."""
    reward_reg, param_reg, prior = regs
    grid = grid_for_ensemble(ensemble, Mollifier(stage.sigma), prior)

    def j_at(x):
        parts = objective(
            ParticleEnsemble(x), features, mdp, stage, reward_reg,
            param_reg, prior, quad_grid=grid,
        )
        return parts.objective

    analytic = grad_j(
        ensemble, features, mdp, stage, reward_reg, param_reg, prior
    ) / ensemble.n
    if hook is not None:
        analytic = hook(analytic)
    scale = max(float(np.abs(analytic).max()), 1e-8)
    worst = 0.0
    smallest = float("inf")
    for i in range(ensemble.n):
        for k in range(ensemble.d):
            xp = ensemble.x.copy()
            xp[i, k] += GRAD_FD_STEP
            xm = ensemble.x.copy()
            xm[i, k] -= GRAD_FD_STEP
            fd = (j_at(xp) - j_at(xm)) / (2.0 * GRAD_FD_STEP)
            an = float(analytic[i, k])
            denom = max(abs(fd), abs(an), 1e-4 * scale)
            worst = max(worst, abs(fd - an) / denom)
            smallest = min(smallest, abs(an))
    return worst, smallest, ensemble.n * ensemble.d


def criterion_gradient_check(gradient_hook=None, rng_seed: int = 2026) -> CriterionResult:
    """Descent field against central differences of the full objective."""
    t0 = time.perf_counter()
    stage = ScheduleStage(n=0, m=5.0, eps=0.05, kappa=0.5, sigma=0.5)
    reward_reg = RewardRegularizer(variant="entropy")
    param_reg = ParamRegularizer(variant="kl")
    prior = make_prior("gaussian")
    regs = (reward_reg, param_reg, prior)
    rng = np.random.default_rng(rng_seed)
    per_env = {}
    for env_key, feat_seed in (("safe-resource", 6), ("safe-chain", 7)):
        mdp = discretized_env(env_key)
        features = make_features(
            "random-fourier", mdp.n_states, mdp.n_actions, 2,
            bound=2.0, seed=feat_seed,
        )
        worst = 0.0
        smallest = float("inf")
        probes = 0
        for _ in range(2):
            ens = ParticleEnsemble(prior.sample(16, 2, rng))
            w, s, c = _fd_probe_ensemble(mdp, features, stage, regs, ens, gradient_hook)
            worst = max(worst, w)
            smallest = min(smallest, s)
            probes += c
        per_env[env_key] = {
            "max_rel_error": worst,
            "probes": probes,
            "min_grad_magnitude": smallest,
        }
    runtime = time.perf_counter() - t0
    passed = all(
        e["max_rel_error"] <= GRAD_REL_TOL and e["probes"] >= GRAD_MIN_PROBES
        for e in per_env.values()
    ) and runtime <= GRAD_BUDGET_S
    measured = {
        "per_env": per_env,
        "rel_tol": GRAD_REL_TOL,
        "fd_step": GRAD_FD_STEP,
        "budget_s": GRAD_BUDGET_S,
    }
    return CriterionResult(1, "gradient-check", bool(passed), measured, runtime)


# ---------------------------------------------------------------------------
# Criterion 2: discrete energy identity and its order in the step size.


def criterion_energy_identity(rng_seed: int = 3) -> CriterionResult:
    """Objective drop equals integrated squared gradient norm, to O(h)."""
    t0 = time.perf_counter()
    stage = ScheduleStage(n=0, m=5.0, eps=0.05, kappa=1.0, sigma=0.4)
    mdp = discretized_env("safe-chain")
    total_time = 5.0
    step_sizes = (1e-2, 5e-3, 2.5e-3)
    residuals = []
    for h in step_sizes:
        config = FlowConfig(
            stages=[stage],
            h=h,
            steps_per_stage=int(round(total_time / h)),
            n_particles=4,
            dim=1,
            feature_key="random-fourier",
            feature_params={"seed": 7},
            env_key="safe-chain",
            seed=rng_seed,
        )
        features = derive_features(config, mdp)
        trace = run_flow(config, mdp=mdp, features=features)
        residuals.append(float(energy_residual(trace, stage_index=0)))
    log_h = np.log(np.array(step_sizes))
    log_res = np.log(np.array(residuals))
    order = float(np.polyfit(log_h, log_res, 1)[0])
    runtime = time.perf_counter() - t0
    passed = (
        residuals[0] <= ENERGY_RESIDUAL_MAX
        and residuals[0] > residuals[1] > residuals[2]
        and order >= ENERGY_ORDER_MIN
        and runtime <= ENERGY_BUDGET_S
    )
    measured = {
        "step_sizes": list(step_sizes),
        "residuals": residuals,
        "order": order,
        "residual_max": ENERGY_RESIDUAL_MAX,
        "order_min": ENERGY_ORDER_MIN,
        "budget_s": ENERGY_BUDGET_S,
    }
    return CriterionResult(2, "energy-identity", bool(passed), measured, runtime)


# ---------------------------------------------------------------------------
# Criteria 3-6 read the shared experiment sweep.


def run_shipped(config_dir, out_root) -> dict:
    """Execute the experiment sweep the trace-based criteria share.

    Both strong-regularization configurations run from two independent
    initializations, both staged configurations run as shipped, and the
    staged chain configuration runs once more with the barrier scale forced
    to zero for the safety comparison.
    """
    config_dir = Path(config_dir)
    out_root = Path(out_root)
    missing = [
        fname for _, fname, _, _ in RUN_PLAN
        if not (config_dir / fname).is_file()
    ]
    if missing:
        raise ConfigError(
            [f"{config_dir}: missing experiment file {name}" for name in sorted(set(missing))]
        )
    runs = {}
    for label, fname, seed, env_overrides in RUN_PLAN:
        out_dir = str(out_root / label)
        if env_overrides is None:
            config = load_config(config_dir / fname, seed=seed, out_dir=out_dir)
        else:
            doc = json.loads((config_dir / fname).read_text())
            overrides = dict(doc.get("env", {}).get("overrides", {}))
            overrides.update(env_overrides)
            doc["env"]["overrides"] = overrides
            doc["name"] = f"{doc.get('name', fname)}-{label}"
            config = parse_config(doc, name_default=label, seed=seed, out_dir=out_dir)
        t0 = time.perf_counter()
        artifacts = run_experiment(config)
        wall = time.perf_counter() - t0
        _, trace = read_trace(artifacts.trace_path)
        runs[label] = ShippedRun(label, config, artifacts, trace, wall)
    return runs


def criterion_monotone_descent(runs: dict) -> CriterionResult:
    """Non-increasing objective under the empirical step-size gate."""
    per_run = {}
    ok = True
    for label in SHIPPED_RUN_LABELS:
        run = runs[label]
        v = run.verdicts
        entry = {
            "completed": v["completed"],
            "monotone": v["monotone_descent"]["pass"],
            "worst_increase": v["monotone_descent"]["worst_increase"],
            "gate": v["step_size_gate"]["pass"],
            "h": v["step_size_gate"]["h"],
            "l_field_max": v["step_size_gate"]["l_field_max"],
        }
        per_run[label] = entry
        ok = ok and entry["completed"] and entry["monotone"] and entry["gate"]
    runtime = sum(runs[label].wall_s for label in SHIPPED_RUN_LABELS)
    return CriterionResult(3, "monotone-descent", bool(ok), {"per_run": per_run}, runtime)


def criterion_exponential_rate(runs: dict) -> CriterionResult:
    """Exponential decay of gap and W2 under strong regularization."""
    per_env = {}
    ok = True
    runtime = 0.0
    for env, label_a, label_b in (
        ("safe-chain", "chain-strong-a", "chain-strong-b"),
        ("safe-resource", "resource-strong-a", "resource-strong-b"),
    ):
        a, b = runs[label_a], runs[label_b]
        runtime += a.wall_s + b.wall_s
        reports = a.artifacts.summary["lambda_reports"]
        fit = reports[0]["fit"] if reports else None
        lambda_ok = bool(a.verdicts["lambda_j_positive"]["pass"]) and bool(
            b.verdicts["lambda_j_positive"]["pass"]
        )
        decay_ok = bool(a.verdicts["exponential_decay"]["pass"]) and bool(
            b.verdicts["exponential_decay"]["pass"]
        )
        w2_final = float(w2(a.trace.positions[-1], b.trace.positions[-1]))
        entry = {
            "lambda_j": [r["lambda_j"] for r in reports],
            "lambda_j_positive": lambda_ok,
            "decay_fits_pass": decay_ok,
            "w2_two_inits": w2_final,
        }
        if fit is not None:
            entry.update(
                rate_j=fit["rate_j"],
                rate_w2=fit["rate_w2"],
                rate_ratio=fit["rate_j"] / (2.0 * fit["rate_w2"]),
                r2_j=fit["r2_j"],
                r2_w2=fit["r2_w2"],
            )
        per_env[env] = entry
        ok = ok and lambda_ok and decay_ok and w2_final <= TWO_INIT_W2_MAX
    ok = ok and runtime <= STRONG_BUDGET_S
    measured = {
        "per_env": per_env,
        "w2_max": TWO_INIT_W2_MAX,
        "budget_s": STRONG_BUDGET_S,
    }
    return CriterionResult(4, "exponential-rate", bool(ok), measured, runtime)


def _terminal_plain_objective(run: ShippedRun) -> float:
    """Untruncated, unregularized objective of the run's final policy."""
    mdp = discretized_env(run.config.env_key, **run.config.env_overrides)
    features = derive_features(run.config.flow, mdp)
    pe = policy_eval(run.trace.final_ensemble(), features, mdp.rho)
    eval_stage = ScheduleStage(n=0, m=np.inf, eps=0.0, kappa=0.0, sigma=1.0)
    return -value_n(pe, mdp, eval_stage).value


def criterion_staged_approach(runs: dict) -> CriterionResult:
    """Staged schedule reaches the dynamic-programming optimum within 5%."""
    run = runs["chain-epi"]
    stages = run.config.flow.stages
    ladder_ok = (
        tuple(s.m for s in stages) == EPI_TRUNCATIONS
        and tuple(s.eps for s in stages) == EPI_PENALTIES
        and all(
            np.isclose(stages[k + 1].kappa, 0.5 * stages[k].kappa)
            for k in range(len(stages) - 1)
        )
        and all(
            np.isclose(stages[k + 1].sigma, 0.5 * stages[k].sigma)
            for k in range(len(stages) - 1)
        )
    )
    mdp = discretized_env(run.config.env_key, **run.config.env_overrides)
    dp = dp_optimal(mdp)
    j0_run = _terminal_plain_objective(run)
    gap = (j0_run - dp.j0_opt) / abs(dp.j0_opt)
    stagewise = bool(run.verdicts["stagewise_improvement"]["pass"])
    runtime = run.wall_s
    ok = (
        ladder_ok
        and run.verdicts["completed"]
        and gap <= EPI_GAP_MAX
        and stagewise
        and runtime <= EPI_BUDGET_S
    )
    measured = {
        "schedule_ladder_ok": ladder_ok,
        "terminal_objective": j0_run,
        "dp_objective": float(dp.j0_opt),
        "relative_gap": float(gap),
        "gap_max": EPI_GAP_MAX,
        "stagewise_improvement": stagewise,
        "stage_best": run.verdicts["stagewise_improvement"]["stage_best"],
        "resource_stagewise_improvement": bool(
            runs["resource-epi"].verdicts["stagewise_improvement"]["pass"]
        ),
        "budget_s": EPI_BUDGET_S,
    }
    return CriterionResult(5, "staged-approach", bool(ok), measured, runtime)


def criterion_safety(runs: dict, rng_seed: int = 3) -> CriterionResult:
    """Terminal policies respect the budget; removing the barrier breaks it."""
    t0 = time.perf_counter()
    rates = {}
    for label in ("chain-epi", "resource-epi", "chain-epi-nobarrier"):
        run = runs[label]
        mdp = discretized_env(run.config.env_key, **run.config.env_overrides)
        features = derive_features(run.config.flow, mdp)
        report = violation_rate(
            run.trace.final_ensemble(),
            features,
            mdp,
            n_rollouts=VIOLATION_ROLLOUTS,
            horizon=VIOLATION_HORIZON,
            rng=rng_seed,
        )
        rates[label] = float(report.rate)
    rollout_s = time.perf_counter() - t0
    runtime = rollout_s + sum(
        runs[label].wall_s
        for label in ("chain-epi", "resource-epi", "chain-epi-nobarrier")
    )
    ok = (
        rates["chain-epi"] <= VIOLATION_MAX
        and rates["resource-epi"] <= VIOLATION_MAX
        and rates["chain-epi-nobarrier"] > rates["chain-epi"]
    )
    measured = {
        "rates": rates,
        "rate_max": VIOLATION_MAX,
        "n_rollouts": VIOLATION_ROLLOUTS,
        "horizon": VIOLATION_HORIZON,
        "rollout_s": rollout_s,
    }
    return CriterionResult(6, "safety-violation", bool(ok), measured, runtime)


# ---------------------------------------------------------------------------
# Criterion 7: policy-layer identities on randomized instances.


def criterion_policy_identities(rng_seed: int = 17, draws: int = IDENTITY_DRAWS) -> CriterionResult:
    """Normalization, density bounds, zero mass, and the gradient bound."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(rng_seed)
    worst_norm = 0.0
    worst_zero_mass = 0.0
    bound_violation = -float("inf")
    worst_grad_ratio = 0.0
    for trial in range(draws):
        n_states = int(rng.integers(2, 9))
        n_actions = int(rng.integers(2, 6))
        if trial % 2 == 0:
            d = n_states * n_actions
            features = make_features("tabular-indicator", n_states, n_actions, d)
        else:
            d = int(rng.integers(1, 4))
            features = make_features(
                "random-fourier", n_states, n_actions, d,
                bound=float(rng.uniform(0.5, 2.5)),
                seed=int(rng.integers(0, 2**31)),
            )
        rho = rng.uniform(0.2, 1.0, size=n_actions)
        rho /= rho.sum()
        n = int(rng.integers(1, 9))
        ens = ParticleEnsemble(rng.normal(scale=rng.uniform(0.5, 3.0), size=(n, d)))
        pe = policy_eval(ens, features, rho)

        worst_norm = max(worst_norm, float(np.abs(pe.masses.sum(axis=1) - 1.0).max()))
        b_sup = features.sup_norm
        lo, hi = np.exp(-2.0 * b_sup), np.exp(2.0 * b_sup)
        bound_violation = max(
            bound_violation,
            float((lo - pe.dens).max()),
            float((pe.dens - hi).max()),
        )
        s = int(rng.integers(n_states))
        x = rng.normal(scale=1.5, size=d)
        v = func_deriv_kernel(pe, features, s, x)
        worst_zero_mass = max(worst_zero_mass, abs(float(rho @ v)))
        g = grad_x_func_deriv(pe, features, s, x)
        total = float(rho @ np.linalg.norm(g, axis=1))
        worst_grad_ratio = max(worst_grad_ratio, total / (2.0 * psi_norm(features, 1)))
    runtime = time.perf_counter() - t0
    ok = (
        worst_norm <= 1e-10
        and bound_violation <= 1e-12
        and worst_zero_mass <= 1e-12
        and worst_grad_ratio <= 1.0 + 1e-12
    )
    measured = {
        "draws": draws,
        "max_normalization_error": worst_norm,
        "max_density_bound_violation": bound_violation,
        "max_zero_mass_error": worst_zero_mass,
        "max_gradient_bound_ratio": worst_grad_ratio,
    }
    return CriterionResult(7, "policy-identities", bool(ok), measured, runtime)


# ---------------------------------------------------------------------------
# Criterion 8: divergence quadrature against closed forms and differences.


def criterion_divergence_oracle(rng_seed: int = 6) -> CriterionResult:
    """KL closed form, quadratic-entropy identity, and gradient differences."""
    t0 = time.perf_counter()
    prior = make_prior("gaussian")
    kl = ParamRegularizer(variant="kl")

    rng = np.random.default_rng(rng_seed)
    big = ParticleEnsemble(1.0 + rng.normal(size=(8192, 1)))
    mol_fine = Mollifier(0.02)
    grid_fine = grid_for_ensemble(big, mol_fine, prior)
    kl_value = float(divergence_H_sigma(big, kl, prior, mol_fine, grid_fine))
    kl_ok = abs(kl_value - 0.5) <= 0.1

    small = ParticleEnsemble(rng.normal(size=(64, 1)))
    mol_mid = Mollifier(0.1)
    grid_mid = grid_for_ensemble(small, mol_mid, prior)
    pts = grid_mid.points()
    rho_vals, _ = mollified_density(small, mol_mid, pts)
    gam_vals = np.exp(-prior.u(pts))
    m2 = m_entropy_eval(rho_vals, gam_vals, grid_mid.cell_volume, 2.0)
    l2 = 0.5 * float(((rho_vals - gam_vals) ** 2).sum()) * grid_mid.cell_volume
    m2_err = abs(m2 - l2)
    m2_ok = m2_err <= 1e-10

    probe = ParticleEnsemble(rng.normal(size=(12, 1)))
    mol = Mollifier(0.05)
    grid = grid_for_ensemble(probe, mol, prior)
    grads, _ = grad_H_sigma(probe, kl, prior, mol)
    step = 1e-4
    worst_fd = 0.0
    for k in range(probe.n):
        xp = probe.x.copy()
        xp[k, 0] += step
        xm = probe.x.copy()
        xm[k, 0] -= step
        fd = (
            divergence_H_sigma(ParticleEnsemble(xp), kl, prior, mol, grid)
            - divergence_H_sigma(ParticleEnsemble(xm), kl, prior, mol, grid)
        ) / (2.0 * step)
        rel = abs(fd - grads[k, 0] / probe.n) / max(abs(fd), 1e-9)
        worst_fd = max(worst_fd, rel)
    fd_ok = worst_fd <= 1e-3

    runtime = time.perf_counter() - t0
    measured = {
        "kl_quadrature": kl_value,
        "kl_target": 0.5,
        "kl_tol": 0.1,
        "quadratic_identity_error": m2_err,
        "grad_fd_max_rel_error": worst_fd,
    }
    return CriterionResult(
        8, "divergence-oracle", bool(kl_ok and m2_ok and fd_ok), measured, runtime
    )


# ---------------------------------------------------------------------------
# Criterion 9: transport metrics against brute force and closed identities.


def _brute_force_wp(xs: np.ndarray, ys: np.ndarray, p: float) -> float:
    n = xs.shape[0]
    best = float("inf")
    for perm in itertools.permutations(range(n)):
        cost = float(
            np.mean(np.linalg.norm(xs - ys[list(perm)], axis=1) ** p)
        )
        best = min(best, cost)
    return best ** (1.0 / p)


def criterion_transport_metrics(rng_seed: int = 9, trials: int = TRANSPORT_TRIALS) -> CriterionResult:
    """Assignment solver vs N! enumeration, sorting, and exact identities."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(rng_seed)
    worst_brute = 0.0
    worst_1d = 0.0
    worst_identity = 0.0
    for trial in range(trials):
        n = int(rng.integers(1, 7))
        d = int(rng.integers(1, 4))
        p = float(rng.choice([1.0, 2.0, 3.0]))
        xs = rng.normal(size=(n, d))
        ys = rng.normal(size=(n, d))
        val = w_p_assignment(xs, ys, p=p).cost
        worst_brute = max(worst_brute, abs(val - _brute_force_wp(xs, ys, p)))
        if d == 1:
            worst_1d = max(worst_1d, abs(val - w_p_1d(xs, ys, p=p)))
        shift = rng.normal(size=d)
        shifted = w_p_assignment(xs + shift, ys + shift, p=p).cost
        worst_identity = max(worst_identity, abs(shifted - val))
        scale = float(rng.uniform(0.5, 3.0))
        scaled = w_p_assignment(scale * xs, scale * ys, p=p).cost
        worst_identity = max(worst_identity, abs(scaled - scale * val))
    for _ in range(30):
        n = int(rng.integers(1, 7))
        xs = rng.normal(size=(n, 1))
        ys = rng.normal(size=(n, 1))
        diff = abs(w_p_assignment(xs, ys, p=2.0).cost - w_p_1d(xs, ys, p=2.0))
        worst_1d = max(worst_1d, diff)
    runtime = time.perf_counter() - t0
    ok = worst_brute <= 1e-12 and worst_1d <= 1e-12 and worst_identity <= 1e-10
    measured = {
        "trials": trials,
        "max_brute_force_gap": worst_brute,
        "max_1d_gap": worst_1d,
        "max_identity_gap": worst_identity,
    }
    return CriterionResult(9, "transport-metrics", bool(ok), measured, runtime)


# ---------------------------------------------------------------------------
# Criterion 10: residual-budget bookkeeping against the discounted sums.


def criterion_budget_equivalence(rng_seed: int = 13, n_traj: int = BUDGET_TRAJECTORIES) -> CriterionResult:
    """Nonnegative-budget criterion vs direct discounted-cost evaluation."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(rng_seed)
    agreements = 0
    total = 0
    violated_count = 0
    for env_key in ("safe-chain", "safe-resource"):
        mdp = make_env(env_key)

        def sampler(state, gen, _n=mdp.n_actions):
            return int(gen.integers(_n))

        for _ in range(n_traj // 2):
            horizon = int(rng.integers(1, 21))
            traj = rollout(mdp, sampler, horizon, rng)
            direct_ok = bool(constraint_satisfied_direct(traj, mdp.safety).all())
            agreements += int(traj.violated == (not direct_ok))
            violated_count += int(traj.violated)
            total += 1
    runtime = time.perf_counter() - t0
    ok = agreements == total and total == n_traj
    measured = {
        "trajectories": total,
        "agreements": agreements,
        "violations_seen": violated_count,
    }
    return CriterionResult(10, "budget-equivalence", bool(ok), measured, runtime)


# ---------------------------------------------------------------------------
# Driver.


def acceptance_report(config_dir=None, out_root=None, gradient_hook=None) -> AcceptanceReport:
    """Run every criterion and persist the combined report.

    config_dir defaults to the configurations shipped inside the package;
    out_root (created if needed) receives one subdirectory per experiment
    plus acceptance.json. A gradient_hook, when given, corrupts the analytic
    gradient before the finite-difference comparison; it exists so tests can
    demonstrate that a wrong field is caught.
    """
    t0 = time.perf_counter()
    from .config import shipped_config_dir

    config_dir = Path(config_dir) if config_dir is not None else shipped_config_dir()
    if not any(config_dir.glob("*.json")):
        raise ConfigError([f"{config_dir}: no experiment files (*.json) found"])
    if out_root is None:
        out_root = tempfile.mkdtemp(prefix="meanflow-acceptance-")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    runs = run_shipped(config_dir, out_root)
    results = [
        criterion_gradient_check(gradient_hook=gradient_hook),
        criterion_energy_identity(),
        criterion_monotone_descent(runs),
        criterion_exponential_rate(runs),
        criterion_staged_approach(runs),
        criterion_safety(runs),
        criterion_policy_identities(),
        criterion_divergence_oracle(),
        criterion_transport_metrics(),
        criterion_budget_equivalence(),
    ]
    report = AcceptanceReport(
        results=results,
        run_status={label: run.artifacts.status for label, run in runs.items()},
        config_dir=str(config_dir),
        out_root=str(out_root),
        total_s=time.perf_counter() - t0,
    )
    (out_root / "acceptance.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"
    )
    return report
