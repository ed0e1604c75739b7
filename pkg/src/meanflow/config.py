"""Experiment configuration: file schema, presets, validation, and hashing.

A config document is a JSON object with sections env, policy, regularizers,
schedule, flow, plus name, out_dir, and seed. Validation walks the whole
document and reports every violation with its field path, so a broken file
surfaces all problems in one pass. The canonical document (defaults filled,
keys ordered) is what gets hashed and echoed into run artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .envs import make_env
from .flow import FlowConfig
from .mdp import MdpValidationError
from .policy import FEATURE_REGISTRY, make_features
from .regularizers import (
    PRIOR_REGISTRY,
    QUADRATURE_MAX_DIM,
    ParamRegularizer,
    RegularizerError,
    RewardRegularizer,
)
from .values import ScheduleStage

SCHEMA_VERSION = 1

TOP_LEVEL_KEYS = ("schema_version", "name", "env", "policy", "regularizers",
                  "schedule", "flow", "out_dir", "seed")
ENV_OVERRIDE_KEYS = ("barrier_scale", "m_bar", "z_cells")

EPI_TRUNCATIONS = (1.0, 2.0, 5.0, 10.0)
EPI_REWARD_WEIGHTS = (0.1, 0.05, 0.02, 0.01)


class ConfigError(ValueError):
    """Carries every violation found while validating one document."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n  ".join(self.violations)
        super().__init__(f"invalid experiment config:\n  {lines}")


def _strong_stages(params: dict) -> list[ScheduleStage]:
    return [
        ScheduleStage(
            n=1,
            m=params["m"],
            eps=params["eps"],
            kappa=params["kappa"],
            sigma=params["sigma"],
        )
    ]


def _epi_stages(params: dict) -> list[ScheduleStage]:
    """Four stages: truncation up, reward weight down, kappa and sigma halving."""
    return [
        ScheduleStage(
            n=i + 1,
            m=EPI_TRUNCATIONS[i],
            eps=EPI_REWARD_WEIGHTS[i],
            kappa=params["kappa0"] / 2.0**i,
            sigma=params["sigma0"] / 2.0**i,
        )
        for i in range(4)
    ]


PRESETS = {
    "strong_regularization": {
        "builder": _strong_stages,
        "defaults": {"kappa": 6.0, "m": 5.0, "eps": 0.05, "sigma": 0.5},
    },
    "epi_convergence": {
        "builder": _epi_stages,
        "defaults": {"kappa0": 0.2, "sigma0": 0.4},
    },
}


@dataclass
class ExperimentConfig:
    """One fully validated experiment: env choice, flow setup, and identity."""

    name: str
    env_key: str
    env_overrides: dict
    preset: str
    flow: FlowConfig
    out_dir: str
    seed: int
    raw: dict


def config_hash(config: ExperimentConfig) -> str:
    """Order-independent digest of the canonical document."""
    blob = json.dumps(config.raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def shipped_config_dir() -> Path:
    """Directory holding the experiment files this package ships with."""
    return Path(__file__).resolve().parent / "configs"


_REQUIRED = object()


def _section(doc: dict, key: str, violations: list) -> dict:
    sec = doc.get(key, {})
    if not isinstance(sec, dict):
        violations.append(f"{key}: must be an object")
        return {}
    return sec


def _scalar(sec, key, path, violations, kind, default, minimum=None,
            exclusive=False, choices=None):
    """Typed field read; records a violation and returns the default on error."""
    if key not in sec or sec[key] is None:
        if default is _REQUIRED:
            violations.append(f"{path}: required")
            return None
        return default
    val = sec[key]
    if kind == "bool":
        if not isinstance(val, bool):
            violations.append(f"{path}: must be a boolean")
            return default if default is not _REQUIRED else None
        return val
    if isinstance(val, bool):
        violations.append(f"{path}: must be a {kind}, not a boolean")
        return default if default is not _REQUIRED else None
    if kind == "int":
        if not isinstance(val, int):
            violations.append(f"{path}: must be an integer")
            return default if default is not _REQUIRED else None
        val = int(val)
    elif kind == "float":
        if not isinstance(val, (int, float)):
            violations.append(f"{path}: must be a number")
            return default if default is not _REQUIRED else None
        val = float(val)
    elif kind == "str":
        if not isinstance(val, str):
            violations.append(f"{path}: must be a string")
            return default if default is not _REQUIRED else None
    if minimum is not None:
        if exclusive and not val > minimum:
            violations.append(f"{path}: must be > {minimum}")
            return default if default is not _REQUIRED else None
        if not exclusive and not val >= minimum:
            violations.append(f"{path}: must be >= {minimum}")
            return default if default is not _REQUIRED else None
    if choices is not None and val not in choices:
        violations.append(f"{path}: must be one of {sorted(choices)}, got {val!r}")
        return default if default is not _REQUIRED else None
    return val


def parse_config(doc: dict, name_default: str = "experiment", *,
                 seed: int | None = None, out_dir: str | None = None) -> ExperimentConfig:
    """Validate one document, collecting every violation before raising.

    seed and out_dir, when given, override the document before anything is
    derived from it, so the canonical echo and the hash reflect the values
    the run will actually use.
    """
    violations: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError(["document: must be a JSON object"])
    doc = dict(doc)
    if seed is not None:
        doc["seed"] = seed
    if out_dir is not None:
        doc["out_dir"] = str(out_dir)
    for key in doc:
        if key not in TOP_LEVEL_KEYS:
            violations.append(f"{key}: unknown section")

    schema = _scalar(doc, "schema_version", "schema_version", violations, "int",
                     SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        violations.append(
            f"schema_version: this build reads version {SCHEMA_VERSION}, got {schema}"
        )
    name = _scalar(doc, "name", "name", violations, "str", name_default)
    run_seed = _scalar(doc, "seed", "seed", violations, "int", 0)

    env_sec = _section(doc, "env", violations)
    for key in env_sec:
        if key not in ("key", "overrides"):
            violations.append(f"env.{key}: unknown field")
    env_key = _scalar(env_sec, "key", "env.key", violations, "str", _REQUIRED)
    overrides_sec = _section(env_sec, "overrides", violations)
    env_overrides: dict = {}
    for key, val in sorted(overrides_sec.items()):
        if key not in ENV_OVERRIDE_KEYS:
            violations.append(f"env.overrides.{key}: unknown override")
            continue
        if key == "z_cells":
            got = _scalar(overrides_sec, key, f"env.overrides.{key}", violations,
                          "int", _REQUIRED, minimum=2)
        elif key == "m_bar":
            got = _scalar(overrides_sec, key, f"env.overrides.{key}", violations,
                          "float", _REQUIRED, minimum=0.0, exclusive=True)
        else:
            got = _scalar(overrides_sec, key, f"env.overrides.{key}", violations,
                          "float", _REQUIRED, minimum=0.0)
        if got is not None:
            env_overrides[key] = got

    policy_sec = _section(doc, "policy", violations)
    for key in policy_sec:
        if key not in ("n_particles", "dim", "feature_key", "feature_params"):
            violations.append(f"policy.{key}: unknown field")
    n_particles = _scalar(policy_sec, "n_particles", "policy.n_particles",
                          violations, "int", 16, minimum=1)
    dim = _scalar(policy_sec, "dim", "policy.dim", violations, "int", 1, minimum=1)
    feature_key = _scalar(policy_sec, "feature_key", "policy.feature_key",
                          violations, "str", "random-fourier",
                          choices=set(FEATURE_REGISTRY))
    feature_params = _section(policy_sec, "feature_params", violations)

    reg_sec = _section(doc, "regularizers", violations)
    for key in reg_sec:
        if key not in ("reward_variant", "reward_power", "param_variant",
                       "param_m", "prior_key"):
            violations.append(f"regularizers.{key}: unknown field")
    reward_variant = _scalar(reg_sec, "reward_variant",
                             "regularizers.reward_variant", violations, "str",
                             "entropy", choices={"entropy", "power"})
    reward_power = _scalar(reg_sec, "reward_power", "regularizers.reward_power",
                           violations, "float", None)
    param_variant = _scalar(reg_sec, "param_variant",
                            "regularizers.param_variant", violations, "str",
                            "kl", choices={"kl", "m_entropy"})
    param_m = _scalar(reg_sec, "param_m", "regularizers.param_m",
                      violations, "float", None)
    prior_key = _scalar(reg_sec, "prior_key", "regularizers.prior_key",
                        violations, "str", "gaussian",
                        choices=set(PRIOR_REGISTRY))
    try:
        RewardRegularizer(variant=reward_variant, p=reward_power)
    except (RegularizerError, MdpValidationError) as exc:
        violations.append(f"regularizers.reward_variant: {exc}")
    try:
        ParamRegularizer(variant=param_variant, m=param_m)
    except (RegularizerError, MdpValidationError) as exc:
        violations.append(f"regularizers.param_variant: {exc}")

    sched_sec = _section(doc, "schedule", violations)
    for key in sched_sec:
        if key not in ("preset", "params"):
            violations.append(f"schedule.{key}: unknown field")
    preset = _scalar(sched_sec, "preset", "schedule.preset", violations, "str",
                     _REQUIRED, choices=set(PRESETS))
    params_sec = _section(sched_sec, "params", violations)
    stages: list[ScheduleStage] = []
    sched_params: dict = {}
    if preset in PRESETS:
        defaults = PRESETS[preset]["defaults"]
        for key in params_sec:
            if key not in defaults:
                violations.append(f"schedule.params.{key}: unknown parameter "
                                  f"for preset {preset}")
        sched_params = dict(defaults)
        for key in defaults:
            got = _scalar(params_sec, key, f"schedule.params.{key}", violations,
                          "float", defaults[key])
            sched_params[key] = got
        try:
            stages = PRESETS[preset]["builder"](sched_params)
        except MdpValidationError as exc:
            violations.append(f"schedule.params: {exc}")
    if stages:
        for prev, cur in zip(stages, stages[1:]):
            if cur.kappa > prev.kappa:
                violations.append("schedule.params: kappa must not increase "
                                  "across stages")
            if cur.sigma > prev.sigma:
                violations.append("schedule.params: sigma must not increase "
                                  "across stages")

    flow_sec = _section(doc, "flow", violations)
    for key in flow_sec:
        if key not in ("h", "steps_per_stage", "entropy_fast_path",
                       "violation_sample_every", "violation_rollouts",
                       "violation_horizon"):
            violations.append(f"flow.{key}: unknown field")
    h = _scalar(flow_sec, "h", "flow.h", violations, "float", 0.01,
                minimum=0.0, exclusive=True)
    steps_raw = flow_sec.get("steps_per_stage", 500)
    if isinstance(steps_raw, bool) or not isinstance(steps_raw, (int, list)):
        violations.append("flow.steps_per_stage: must be an integer or a list "
                          "of integers")
        steps_raw = 500
    if isinstance(steps_raw, list):
        if not all(isinstance(t, int) and not isinstance(t, bool) for t in steps_raw):
            violations.append("flow.steps_per_stage: entries must be integers")
            steps_raw = 500
        elif stages and len(steps_raw) != len(stages):
            violations.append(
                f"flow.steps_per_stage: got {len(steps_raw)} entries for "
                f"{len(stages)} stages"
            )
            steps_raw = 500
    if isinstance(steps_raw, int) and steps_raw < 0:
        violations.append("flow.steps_per_stage: must be >= 0")
        steps_raw = 500
    if isinstance(steps_raw, list) and any(t < 0 for t in steps_raw):
        violations.append("flow.steps_per_stage: entries must be >= 0")
        steps_raw = 500
    entropy_fast_path = _scalar(flow_sec, "entropy_fast_path",
                                "flow.entropy_fast_path", violations, "bool",
                                False)
    violation_sample_every = _scalar(flow_sec, "violation_sample_every",
                                     "flow.violation_sample_every", violations,
                                     "int", 0, minimum=0)
    violation_rollouts = _scalar(flow_sec, "violation_rollouts",
                                 "flow.violation_rollouts", violations, "int",
                                 200, minimum=1)
    violation_horizon = _scalar(flow_sec, "violation_horizon",
                                "flow.violation_horizon", violations, "int",
                                100, minimum=1)

    final_out = _scalar(doc, "out_dir", "out_dir", violations, "str",
                        f"runs/{name}")

    if entropy_fast_path and reward_variant != "entropy":
        violations.append("flow.entropy_fast_path: only valid with the "
                          "entropy reward regularizer")
    if stages and any(s.kappa > 0 for s in stages) and dim > QUADRATURE_MAX_DIM:
        violations.append(
            f"policy.dim: divergence quadrature supports dim <= "
            f"{QUADRATURE_MAX_DIM} whenever any stage has kappa > 0, got {dim}"
        )

    env = None
    if env_key is not None:
        try:
            env = make_env(env_key, **env_overrides)
        except MdpValidationError as exc:
            violations.append(f"env: {exc}")
        except TypeError as exc:
            violations.append(f"env.overrides: {exc}")
    if env is not None and stages:
        need = stages[-1].m + env.u_sup_plus
        if env.barrier.m_bar < need:
            violations.append(
                f"env.overrides.m_bar: barrier cap {env.barrier.m_bar} makes "
                f"the clamp visible through the truncation; need m_bar >= "
                f"final-stage m + positive-part reward sup = {need}"
            )
    if env is not None and feature_key in FEATURE_REGISTRY:
        try:
            make_features(feature_key, env.n_states, env.n_actions, dim,
                          **feature_params)
        except Exception as exc:
            violations.append(f"policy.feature_params: {exc}")

    if violations:
        raise ConfigError(violations)

    flow = FlowConfig(
        stages=stages,
        h=h,
        steps_per_stage=steps_raw,
        n_particles=n_particles,
        dim=dim,
        feature_key=feature_key,
        feature_params=dict(feature_params),
        reward_variant=reward_variant,
        reward_power=reward_power,
        param_variant=param_variant,
        param_m=param_m,
        prior_key=prior_key,
        env_key=env_key,
        seed=run_seed,
        entropy_fast_path=entropy_fast_path,
        violation_sample_every=violation_sample_every,
        violation_rollouts=violation_rollouts,
        violation_horizon=violation_horizon,
    )
    raw = {
        "schema_version": SCHEMA_VERSION,
        "name": name,
        "env": {"key": env_key, "overrides": dict(sorted(env_overrides.items()))},
        "policy": {
            "n_particles": n_particles,
            "dim": dim,
            "feature_key": feature_key,
            "feature_params": dict(sorted(feature_params.items())),
        },
        "regularizers": {
            "reward_variant": reward_variant,
            "reward_power": reward_power,
            "param_variant": param_variant,
            "param_m": param_m,
            "prior_key": prior_key,
        },
        "schedule": {"preset": preset, "params": dict(sorted(sched_params.items()))},
        "flow": {
            "h": h,
            "steps_per_stage": list(flow.steps_per_stage),
            "entropy_fast_path": entropy_fast_path,
            "violation_sample_every": violation_sample_every,
            "violation_rollouts": violation_rollouts,
            "violation_horizon": violation_horizon,
        },
        "out_dir": final_out,
        "seed": run_seed,
    }
    return ExperimentConfig(
        name=name,
        env_key=env_key,
        env_overrides=env_overrides,
        preset=preset,
        flow=flow,
        out_dir=final_out,
        seed=run_seed,
        raw=raw,
    )


def load_config(path, *, seed: int | None = None,
                out_dir: str | None = None) -> ExperimentConfig:
    """Read and validate one experiment file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([f"{p}: unreadable ({exc})"]) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{p}: not valid JSON ({exc})"]) from exc
    if not isinstance(doc, dict):
        raise ConfigError([f"{p}: top level must be a JSON object"])
    return parse_config(doc, name_default=p.stem, seed=seed, out_dir=out_dir)
