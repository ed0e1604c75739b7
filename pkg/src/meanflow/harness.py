"""Experiment orchestration: persistence, plot emission, offline verdicts.

A run writes four kinds of artifact into its output directory: a
line-delimited trace (one JSON object per step, schema versioned), a summary
with regularity accounting and verdicts, and tab-separated plot data. Every
file carries the config hash and the seed, traces are byte-identical across
reruns of the same (config, seed), and every verdict can be recomputed from
the trace file alone.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, parse_config
from .envs import discretized_env
from .flow import (
    FlowError,
    FlowTrace,
    LambdaReport,
    LipschitzEstimate,
    StepRecord,
    build_regularizers,
    derive_features,
    energy_residual,
    estimate_lambda_h,
    estimate_lipschitz,
    fit_decay,
    run_flow,
)
from .metrics import w2
from .policy import ParticleEnsemble
from .regularizers import Mollifier

TRACE_SCHEMA_VERSION = 1
MONOTONE_TOLERANCE = 1e-10
ENERGY_RESIDUAL_BAR = 0.10
STEP_GATE_FACTOR = 0.5
LIPSCHITZ_PROBES = 8
FIT_R2_BAR = 0.95
RATE_RATIO_WINDOW = (0.7, 1.3)

TRACE_FILE = "trace.jsonl"
SUMMARY_FILE = "summary.json"
PLOT_FILES = {
    "objective": "objective.tsv",
    "log_gap": "log_gap.tsv",
    "w2": "w2.tsv",
    "stage_boundaries": "stage_boundaries.tsv",
}


@dataclass
class RunArtifacts:
    """What one invocation produced: exit status plus paths on disk."""

    status: int
    out_dir: Path | None
    trace_path: Path | None
    summary_path: Path | None
    plot_paths: dict
    summary: dict | None


def _probe_stages(config: ExperimentConfig, mdp, features):
    reward_reg, param_reg, prior = build_regularizers(config.flow)
    rows = []
    for stage in config.flow.stages:
        est = estimate_lipschitz(
            mdp,
            features,
            stage,
            reward_reg,
            param_reg,
            prior,
            probes=LIPSCHITZ_PROBES,
            rng=0,
            n_particles=config.flow.n_particles,
            entropy_fast_path=config.flow.entropy_fast_path,
        )
        rows.append(est)
    return rows


def _stage_burn_in(n_records: int) -> int:
    return n_records // 5


def _lambda_reports(config: ExperimentConfig, trace: FlowTrace, lipschitz_rows):
    """Per-stage convexity accounting from the trace and the probe rows."""
    _, param_reg, prior = build_regularizers(config.flow)
    reports = []
    for k, stage in enumerate(config.flow.stages):
        if k >= len(trace.stage_bounds):
            break
        est = lipschitz_rows[k]
        lam_h = 0.0
        pos = trace.stage_positions(k)
        if stage.kappa > 0 and len(pos):
            ens = ParticleEnsemble(x=pos[-1].copy())
            lam_h = estimate_lambda_h(ens, param_reg, prior, Mollifier(stage.sigma))
        fit = None
        if not trace.aborted:
            try:
                fit = fit_decay(trace, _stage_burn_in(len(pos)), stage_index=k)
            except (FlowError, ValueError):
                fit = None
        reports.append(
            LambdaReport(
                kappa=stage.kappa,
                lambda_h=lam_h,
                c_v=est.c_v,
                k_v=est.k_v,
                l_field=est.l_field,
                fit=fit,
            )
        )
    return reports


def _stage_objectives(trace: FlowTrace):
    return [
        [r.objective for r in trace.stage_records(k)]
        for k in range(len(trace.stage_bounds))
    ]


def compute_verdicts(config: ExperimentConfig, trace: FlowTrace, lipschitz_rows,
                     reports) -> dict:
    """Pass/fail summary, derived only from trace content and probe rows."""
    per_stage = _stage_objectives(trace)
    worst_increase = 0.0
    for js in per_stage:
        if len(js) > 1:
            worst_increase = max(worst_increase, float(np.diff(js).max()))
    monotone = worst_increase <= MONOTONE_TOLERANCE

    l_max = max((est.l_field for est in lipschitz_rows), default=0.0)
    gate = config.flow.h <= STEP_GATE_FACTOR / l_max if l_max > 0 else True

    residuals = []
    for k in range(len(trace.stage_bounds)):
        try:
            res = float(energy_residual(trace, stage_index=k))
        except FlowError:
            res = float("nan")
        residuals.append(res if np.isfinite(res) else None)
    finite = [r for r in residuals if r is not None]
    energy_pass = max(finite) <= ENERGY_RESIDUAL_BAR if finite else None

    strong = config.preset == "strong_regularization"
    lambda_pass = None
    if strong and reports:
        lambda_pass = all(r.lambda_j > 0 for r in reports)
    decay_pass = None
    if strong and reports:
        fits = [r.fit for r in reports]
        if any(f is None for f in fits):
            decay_pass = False
        else:
            lo, hi = RATE_RATIO_WINDOW
            decay_pass = all(
                f.r2_j >= FIT_R2_BAR
                and f.r2_w2 >= FIT_R2_BAR
                and lo <= f.rate_j / (2.0 * f.rate_w2) <= hi
                for f in fits
            )
    improvement_pass = None
    if config.preset == "epi_convergence" and len(per_stage) > 1:
        bests = [min(js) for js in per_stage if js]
        improvement_pass = all(b < a for a, b in zip(bests, bests[1:]))

    return {
        "completed": not trace.aborted,
        "monotone_descent": {"pass": bool(monotone),
                             "worst_increase": worst_increase},
        "step_size_gate": {"pass": bool(gate), "h": config.flow.h,
                           "l_field_max": l_max},
        "energy_residual": {"pass": energy_pass, "per_stage": residuals},
        "lambda_j_positive": {
            "pass": lambda_pass,
            "per_stage": [r.lambda_j for r in reports],
        },
        "exponential_decay": {"pass": decay_pass},
        "stagewise_improvement": {
            "pass": improvement_pass,
            "stage_best": [min(js) if js else None for js in per_stage],
        },
    }


def _record_line(rec: StepRecord, positions: np.ndarray) -> str:
    return json.dumps(
        {
            "kind": "record",
            "step": rec.step,
            "stage": rec.stage_index,
            "time": rec.time,
            "objective": rec.objective,
            "value": rec.value_part,
            "divergence": rec.divergence_part,
            "grad_norm_sq": rec.grad_norm_sq,
            "x": positions.tolist(),
        },
        sort_keys=True,
    )


def write_trace(path: Path, config: ExperimentConfig, trace: FlowTrace,
                lipschitz_rows) -> None:
    header = {
        "kind": "header",
        "trace_schema": TRACE_SCHEMA_VERSION,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "name": config.name,
        "env_key": config.env_key,
        "h": trace.h,
        "n_particles": config.flow.n_particles,
        "dim": config.flow.dim,
        "stage_bounds": [list(b) for b in trace.stage_bounds],
        "stages": [
            {"m": s.m, "eps": s.eps, "kappa": s.kappa, "sigma": s.sigma,
             "steps": t}
            for s, t in zip(config.flow.stages, config.flow.steps_per_stage)
        ],
        "lipschitz": [
            {"c_v": e.c_v, "k_v": e.k_v, "m_growth": e.m_growth,
             "l_field": e.l_field, "c_v_analytic": e.c_v_analytic,
             "probes": e.probes}
            for e in lipschitz_rows
        ],
        "aborted": trace.aborted,
        "abort_reason": trace.abort_reason,
        "config": config.raw,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i, rec in enumerate(trace.records):
        lines.append(_record_line(rec, trace.positions[i]))
    for idx, rate in trace.violation_samples:
        lines.append(
            json.dumps(
                {"kind": "violation_sample", "record": idx, "rate": rate},
                sort_keys=True,
            )
        )
    path.write_text("\n".join(lines) + "\n")


def read_trace(path) -> tuple[dict, FlowTrace]:
    """Rebuild the trace from disk; wall clocks are not persisted."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FlowError(f"{path}: empty trace file")
    header = json.loads(lines[0])
    if header.get("kind") != "header":
        raise FlowError(f"{path}: first line must be the trace header")
    if header.get("trace_schema") != TRACE_SCHEMA_VERSION:
        raise FlowError(
            f"{path}: trace schema {header.get('trace_schema')} unsupported"
        )
    records = []
    positions = []
    violations = []
    for line in lines[1:]:
        obj = json.loads(line)
        if obj["kind"] == "record":
            records.append(
                StepRecord(
                    step=obj["step"],
                    stage_index=obj["stage"],
                    time=obj["time"],
                    objective=obj["objective"],
                    value_part=obj["value"],
                    divergence_part=obj["divergence"],
                    grad_norm_sq=obj["grad_norm_sq"],
                    w2_to_reference=float("nan"),
                    wall_time=0.0,
                )
            )
            positions.append(np.asarray(obj["x"], dtype=float))
        elif obj["kind"] == "violation_sample":
            violations.append((obj["record"], obj["rate"]))
    trace = FlowTrace(
        records=records,
        positions=np.stack(positions) if positions else np.zeros((0, 0, 0)),
        h=header["h"],
        stage_bounds=[tuple(b) for b in header["stage_bounds"]],
        violation_samples=violations,
        seed=header["seed"],
        aborted=header["aborted"],
        abort_reason=header.get("abort_reason"),
    )
    return header, trace


def _stamp(config: ExperimentConfig) -> str:
    return f"# config_hash: {config_hash(config)}\n# seed: {config.seed}\n"


def write_plots(out_dir: Path, config: ExperimentConfig, trace: FlowTrace) -> dict:
    """Tabular plot data: objective, per-stage log gap, per-stage W2, bounds."""
    stamp = _stamp(config)
    paths = {}

    rows = ["step\ttime\tobjective"]
    for rec in trace.records:
        rows.append(f"{rec.step}\t{rec.time!r}\t{rec.objective!r}")
    paths["objective"] = out_dir / PLOT_FILES["objective"]
    paths["objective"].write_text(stamp + "\n".join(rows) + "\n")

    rows = ["step\ttime\tstage\tlog10_gap"]
    for k in range(len(trace.stage_bounds)):
        recs = trace.stage_records(k)
        if not recs:
            continue
        j_star = min(r.objective for r in recs)
        for rec in recs:
            gap = rec.objective - j_star
            if gap > 0:
                rows.append(
                    f"{rec.step}\t{rec.time!r}\t{k}\t{float(np.log10(gap))!r}"
                )
    paths["log_gap"] = out_dir / PLOT_FILES["log_gap"]
    paths["log_gap"].write_text(stamp + "\n".join(rows) + "\n")

    rows = ["step\ttime\tstage\tw2_to_stage_final"]
    for k in range(len(trace.stage_bounds)):
        recs = trace.stage_records(k)
        pos = trace.stage_positions(k)
        if not len(pos):
            continue
        final = pos[-1]
        for rec, p in zip(recs, pos):
            rows.append(f"{rec.step}\t{rec.time!r}\t{k}\t{float(w2(p, final))!r}")
    paths["w2"] = out_dir / PLOT_FILES["w2"]
    paths["w2"].write_text(stamp + "\n".join(rows) + "\n")

    rows = ["stage\tstart_record\tend_record\tstart_time\tend_time\tm\teps\tkappa\tsigma"]
    for k, (lo, hi) in enumerate(trace.stage_bounds):
        stage = config.flow.stages[k]
        t0 = trace.records[lo].time
        t1 = trace.records[hi - 1].time
        rows.append(
            f"{k}\t{lo}\t{hi}\t{t0!r}\t{t1!r}\t{stage.m!r}\t{stage.eps!r}"
            f"\t{stage.kappa!r}\t{stage.sigma!r}"
        )
    paths["stage_boundaries"] = out_dir / PLOT_FILES["stage_boundaries"]
    paths["stage_boundaries"].write_text(stamp + "\n".join(rows) + "\n")
    return paths


def _report_dict(report: LambdaReport) -> dict:
    out = {
        "kappa": report.kappa,
        "lambda_h": report.lambda_h,
        "c_v": report.c_v,
        "k_v": report.k_v,
        "l_field": report.l_field,
        "lambda_j": report.lambda_j,
        "fit": asdict(report.fit) if report.fit is not None else None,
    }
    return out


def run_experiment(config: ExperimentConfig, dry_run: bool = False) -> RunArtifacts:
    """Execute one experiment and persist its artifacts.

    Returns status 0 on a completed run, 1 when the flow aborted; the partial
    trace and summary are still written in that case. With dry_run the config
    is only echoed back: validation already happened at load time.
    """
    if dry_run:
        return RunArtifacts(
            status=0,
            out_dir=None,
            trace_path=None,
            summary_path=None,
            plot_paths={},
            summary={"name": config.name, "config_hash": config_hash(config),
                     "seed": config.seed, "dry_run": True,
                     "config": config.raw},
        )
    t_start = time.perf_counter()
    mdp = discretized_env(config.env_key, **config.env_overrides)
    features = derive_features(config.flow, mdp)

    t_probe = time.perf_counter()
    lipschitz_rows = _probe_stages(config, mdp, features)
    probes_s = time.perf_counter() - t_probe

    t_flow = time.perf_counter()
    trace = run_flow(config.flow, mdp=mdp, features=features)
    flow_s = time.perf_counter() - t_flow

    reports = _lambda_reports(config, trace, lipschitz_rows)
    verdicts = compute_verdicts(config, trace, lipschitz_rows, reports)

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / TRACE_FILE
    write_trace(trace_path, config, trace, lipschitz_rows)
    plot_paths = write_plots(out_dir, config, trace)

    objectives = trace.objectives()
    summary = {
        "summary_schema": TRACE_SCHEMA_VERSION,
        "name": config.name,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "status": 1 if trace.aborted else 0,
        "aborted": trace.aborted,
        "abort_reason": trace.abort_reason,
        "config": config.raw,
        "wall_times": {
            "probes_s": probes_s,
            "flow_s": flow_s,
            "total_s": time.perf_counter() - t_start,
        },
        "lambda_reports": [_report_dict(r) for r in reports],
        "verdicts": verdicts,
        "objectives": {
            "initial": float(objectives[0]) if len(objectives) else None,
            "final": float(objectives[-1]) if len(objectives) else None,
            "stage_best": verdicts["stagewise_improvement"]["stage_best"],
        },
        "violation_samples": [
            {"record": idx, "rate": rate} for idx, rate in trace.violation_samples
        ],
        "artifacts": {"trace": TRACE_FILE,
                      **{k: v for k, v in PLOT_FILES.items()}},
    }
    summary_path = out_dir / SUMMARY_FILE
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return RunArtifacts(
        status=summary["status"],
        out_dir=out_dir,
        trace_path=trace_path,
        summary_path=summary_path,
        plot_paths=plot_paths,
        summary=summary,
    )


def verdicts_from_trace(path) -> dict:
    """Recompute the summary verdicts from the trace file alone."""
    header, trace = read_trace(path)
    config = parse_config(header["config"], header["name"])
    rows = [LipschitzEstimate(**entry) for entry in header["lipschitz"]]
    reports = _lambda_reports(config, trace, rows)
    return compute_verdicts(config, trace, rows, reports)
