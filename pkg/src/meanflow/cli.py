"""Command-line entry point for experiments, diagnostics, and acceptance.

Subcommands: run executes one experiment file end to end; check-grad
compares the analytic descent field against finite differences;
probe-lipschitz reports the empirical regularity constants and the step
sizes they allow; fit-rates recomputes decay fits and verdicts from a
stored trace; solve-dp solves the discretized environment exactly and can
export the optimal action table; acceptance drives the full criterion
suite. Exit codes: 0 success, 1 a check or run failed, 2 usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

import numpy as np


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meanflow",
        description="Particle-flow experiments for safety-constrained control.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment file")
    p_run.add_argument("--config", required=True, help="experiment file (json)")
    p_run.add_argument("--seed", type=int, default=None, help="override the run seed")
    p_run.add_argument("--out", default=None, help="override the output directory")
    p_run.add_argument("--dry-run", action="store_true",
                       help="validate and echo the config without computing")

    p_grad = sub.add_parser(
        "check-grad", help="finite-difference check of the descent field"
    )
    p_grad.add_argument("--config", default=None,
                        help="probe this experiment's env, features, and first stage "
                             "(default: built-in probes on both environments)")
    p_grad.add_argument("--seed", type=int, default=2026, help="probe draw seed")
    p_grad.add_argument("--probes", type=int, default=2,
                        help="ensembles drawn per environment (default 2)")

    p_lip = sub.add_parser(
        "probe-lipschitz", help="empirical regularity constants per stage"
    )
    p_lip.add_argument("--config", required=True, help="experiment file (json)")
    p_lip.add_argument("--seed", type=int, default=None, help="override the run seed")
    p_lip.add_argument("--out", default=None,
                       help="also write the table to DIR/lipschitz.tsv")

    p_fit = sub.add_parser(
        "fit-rates", help="decay fits and verdicts from a stored trace"
    )
    p_fit.add_argument("--trace", default=None, help="path to a trace file")
    p_fit.add_argument("--out", default=None,
                       help="run directory holding trace.jsonl (alternative to --trace)")

    p_dp = sub.add_parser(
        "solve-dp", help="exact solve of the experiment's environment"
    )
    p_dp.add_argument("--config", required=True, help="experiment file (json)")
    p_dp.add_argument("--out", default=None,
                      help="write the optimal action table to DIR/dp-policy.tsv")

    p_acc = sub.add_parser("acceptance", help="run the acceptance criteria")
    p_acc.add_argument("--config", default=None,
                       help="directory of experiment files (default: shipped set)")
    p_acc.add_argument("--out", default=None,
                       help="artifact directory (default: a fresh temp dir)")
    return parser


def _fail_usage(message: str) -> int:
    print(f"meanflow: error: {message}", file=sys.stderr)
    return 2


def _print_config_error(exc) -> int:
    print("meanflow: invalid configuration:", file=sys.stderr)
    for line in exc.args[0] if isinstance(exc.args[0], list) else [str(exc)]:
        print(f"  {line}", file=sys.stderr)
    return 2


def _cmd_run(args) -> int:
    from .config import ConfigError, config_hash, load_config
    from .harness import run_experiment

    try:
        config = load_config(args.config, seed=args.seed, out_dir=args.out)
    except ConfigError as exc:
        return _print_config_error(exc)
    artifacts = run_experiment(config, dry_run=args.dry_run)
    if args.dry_run:
        print(f"{config.name}: config valid (hash {config_hash(config)})")
        print(json.dumps(artifacts.summary["config"], sort_keys=True, indent=1))
        return 0
    summary = artifacts.summary
    print(f"{config.name}: status {artifacts.status} "
          f"(hash {summary['config_hash'][:12]}, seed {summary['seed']})")
    if summary["aborted"]:
        print(f"  aborted: {summary['abort_reason']}")
    obj = summary["objectives"]
    if obj["initial"] is not None:
        print(f"  objective {obj['initial']:.6f} -> {obj['final']:.6f}")
    for key, verdict in summary["verdicts"].items():
        if key == "completed":
            continue
        state = verdict["pass"]
        if state is None:
            continue
        print(f"  {key}: {'pass' if state else 'FAIL'}")
    print(f"  artifacts in {artifacts.out_dir}")
    return artifacts.status


def _cmd_check_grad(args) -> int:
    from .acceptance import GRAD_REL_TOL, _fd_probe_ensemble
    from .config import ConfigError, load_config
    from .envs import discretized_env
    from .flow import build_regularizers, derive_features
    from .policy import ParticleEnsemble

    if args.probes < 1:
        return _fail_usage("--probes must be at least 1")
    if args.config is None:
        from .acceptance import criterion_gradient_check

        result = criterion_gradient_check(rng_seed=args.seed)
        for env, entry in result.measured["per_env"].items():
            print(f"{env}: max rel error {entry['max_rel_error']:.3e} "
                  f"over {entry['probes']} probes")
        print("pass" if result.passed else "FAIL")
        return 0 if result.passed else 1

    try:
        config = load_config(args.config, seed=args.seed)
    except ConfigError as exc:
        return _print_config_error(exc)
    mdp = discretized_env(config.env_key, **config.env_overrides)
    features = derive_features(config.flow, mdp)
    regs = build_regularizers(config.flow)
    stage = config.flow.stages[0]
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    count = 0
    for _ in range(args.probes):
        ens = ParticleEnsemble(
            regs[2].sample(config.flow.n_particles, config.flow.dim, rng)
        )
        w, _, c = _fd_probe_ensemble(mdp, features, stage, regs, ens, None)
        worst = max(worst, w)
        count += c
    ok = worst <= GRAD_REL_TOL
    print(f"{config.name}: max rel error {worst:.3e} over {count} probes "
          f"({'pass' if ok else 'FAIL'})")
    return 0 if ok else 1


def _cmd_probe_lipschitz(args) -> int:
    from .config import ConfigError, load_config
    from .envs import discretized_env
    from .flow import derive_features
    from .harness import STEP_GATE_FACTOR, _probe_stages

    try:
        config = load_config(args.config, seed=args.seed)
    except ConfigError as exc:
        return _print_config_error(exc)
    mdp = discretized_env(config.env_key, **config.env_overrides)
    features = derive_features(config.flow, mdp)
    rows = _probe_stages(config, mdp, features)
    header = ["stage", "c_v", "k_v", "m_growth", "c_v_analytic", "l_field", "h_max"]
    lines = ["\t".join(header)]
    print(f"{config.name}: h = {config.flow.h}")
    for k, est in enumerate(rows):
        h_max = STEP_GATE_FACTOR / est.l_field if est.l_field > 0 else float("inf")
        print(f"  stage {k}: c_v {est.c_v:.4g}  k_v {est.k_v:.4g}  "
              f"l_field {est.l_field:.4g}  h_max {h_max:.4g}")
        lines.append("\t".join(
            f"{v:.12g}" for v in
            (k, est.c_v, est.k_v, est.m_growth, est.c_v_analytic, est.l_field, h_max)
        ))
    l_max = max((est.l_field for est in rows), default=0.0)
    gate = config.flow.h <= STEP_GATE_FACTOR / l_max if l_max > 0 else True
    print(f"  step-size gate: {'pass' if gate else 'FAIL'}")
    if args.out is not None:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "lipschitz.tsv").write_text("\n".join(lines) + "\n")
        print(f"  table written to {out_dir / 'lipschitz.tsv'}")
    return 0


def _cmd_fit_rates(args) -> int:
    from .config import ConfigError, parse_config
    from .flow import FlowError, LipschitzEstimate
    from .harness import TRACE_FILE, _lambda_reports, compute_verdicts, read_trace

    if (args.trace is None) == (args.out is None):
        return _fail_usage("fit-rates needs exactly one of --trace or --out")
    path = Path(args.trace) if args.trace else Path(args.out) / TRACE_FILE
    if not path.is_file():
        return _fail_usage(f"no trace file at {path}")
    try:
        header, trace = read_trace(path)
        config = parse_config(header["config"], header["name"])
    except (FlowError, ConfigError, KeyError, json.JSONDecodeError) as exc:
        return _fail_usage(f"unreadable trace {path}: {exc}")
    rows = [LipschitzEstimate(**entry) for entry in header["lipschitz"]]
    reports = _lambda_reports(config, trace, rows)
    print(f"{header['name']}: {len(trace.records)} records, "
          f"{len(trace.stage_bounds)} stages"
          + (" (aborted)" if trace.aborted else ""))
    for k, rep in enumerate(reports):
        line = (f"  stage {k}: kappa {rep.kappa:.4g}  lambda_h {rep.lambda_h:.4g}  "
                f"lambda_j {rep.lambda_j:.4g}")
        if rep.fit is not None:
            f = rep.fit
            line += (f"  rate_j {f.rate_j:.4g} (r2 {f.r2_j:.4f})  "
                     f"rate_w2 {f.rate_w2:.4g} (r2 {f.r2_w2:.4f})  "
                     f"ratio {f.rate_j / (2.0 * f.rate_w2):.3f}")
        else:
            line += "  no decay fit"
        print(line)
    verdicts = compute_verdicts(config, trace, rows, reports)
    for key, verdict in verdicts.items():
        if key == "completed" or verdict["pass"] is None:
            continue
        print(f"  {key}: {'pass' if verdict['pass'] else 'FAIL'}")
    return 0


def _cmd_solve_dp(args) -> int:
    from .config import ConfigError, config_hash, load_config
    from .envs import discretized_env
    from .values import dp_optimal

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        return _print_config_error(exc)
    mdp = discretized_env(config.env_key, **config.env_overrides)
    report = dp_optimal(mdp)
    print(f"{config.env_key}: {mdp.n_states} states, {mdp.n_actions} actions")
    print(f"  optimal objective {report.j0_opt:.6f} "
          f"({report.iterations} iterations)")
    if args.out is not None:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "dp-policy.tsv"
        lines = [
            f"# config_hash: {config_hash(config)}",
            f"# env: {config.env_key}",
            f"# j0_opt: {report.j0_opt:.12g}",
            "state\taction",
        ]
        lines += [f"{s}\t{int(a)}" for s, a in enumerate(report.policy)]
        path.write_text("\n".join(lines) + "\n")
        print(f"  action table written to {path}")
    return 0


def _cmd_acceptance(args) -> int:
    from .acceptance import acceptance_report
    from .config import ConfigError, shipped_config_dir

    config_dir = Path(args.config) if args.config else shipped_config_dir()
    if not config_dir.is_dir():
        return _fail_usage(f"{config_dir} is not a directory")
    out_root = args.out or tempfile.mkdtemp(prefix="meanflow-acceptance-")
    try:
        report = acceptance_report(config_dir=config_dir, out_root=out_root)
    except ConfigError as exc:
        return _print_config_error(exc)
    for r in report.results:
        print(f"  {'PASS' if r.passed else 'FAIL'}  {r.index:2d} "
              f"{r.name:<20s} {r.runtime_s:8.1f}s")
    print(f"{'all criteria passed' if report.all_passed else 'FAILURES present'} "
          f"({report.total_s:.1f}s); artifacts in {report.out_root}")
    return 0 if report.all_passed else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "check-grad": _cmd_check_grad,
        "probe-lipschitz": _cmd_probe_lipschitz,
        "fit-rates": _cmd_fit_rates,
        "solve-dp": _cmd_solve_dp,
        "acceptance": _cmd_acceptance,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
