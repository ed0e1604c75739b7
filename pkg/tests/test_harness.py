"""Harness tests: artifacts on disk, reproducibility, offline verdicts."""

import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from meanflow.config import config_hash, parse_config
from meanflow.flow import FlowError
from meanflow.harness import (
    PLOT_FILES,
    SUMMARY_FILE,
    TRACE_FILE,
    TRACE_SCHEMA_VERSION,
    read_trace,
    run_experiment,
    verdicts_from_trace,
)


def small_doc(out_dir, **flow_extra):
    flow = {"h": 0.01, "steps_per_stage": 120, "violation_sample_every": 40}
    flow.update(flow_extra)
    return {
        "env": {"key": "safe-chain"},
        "schedule": {
            "preset": "strong_regularization",
            "params": {"kappa": 1.0, "sigma": 0.4},
        },
        "flow": flow,
        "policy": {"n_particles": 4, "dim": 1, "feature_params": {"seed": 7}},
        "out_dir": str(out_dir),
        "seed": 3,
    }


@pytest.fixture(scope="module")
def completed(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "exp"
    cfg = parse_config(small_doc(out), "fixture")
    return cfg, run_experiment(cfg)


class TestArtifacts:
    def test_status_and_paths(self, completed):
        cfg, art = completed
        assert art.status == 0
        assert art.trace_path.name == TRACE_FILE
        assert art.summary_path.name == SUMMARY_FILE
        assert art.trace_path.exists() and art.summary_path.exists()
        for key, fname in PLOT_FILES.items():
            assert art.plot_paths[key].name == fname
            assert art.plot_paths[key].exists()

    def test_summary_identity_fields(self, completed):
        cfg, art = completed
        s = json.loads(art.summary_path.read_text())
        assert s["config_hash"] == config_hash(cfg)
        assert len(s["config_hash"]) == 64
        assert s["seed"] == 3
        assert s["summary_schema"] == TRACE_SCHEMA_VERSION
        assert s["aborted"] is False

    def test_summary_verdict_keys(self, completed):
        _, art = completed
        v = art.summary["verdicts"]
        assert set(v) == {
            "completed",
            "monotone_descent",
            "step_size_gate",
            "energy_residual",
            "lambda_j_positive",
            "exponential_decay",
            "stagewise_improvement",
        }
        assert v["completed"] is True
        assert v["monotone_descent"]["pass"] is True

    def test_plot_stamps(self, completed):
        cfg, art = completed
        for path in art.plot_paths.values():
            lines = path.read_text().splitlines()
            assert lines[0] == f"# config_hash: {config_hash(cfg)}"
            assert lines[1] == "# seed: 3"
            assert "\t" in lines[2]

    def test_trace_header(self, completed):
        cfg, art = completed
        header = json.loads(art.trace_path.read_text().splitlines()[0])
        assert header["kind"] == "header"
        assert header["config_hash"] == config_hash(cfg)
        assert header["env_key"] == "safe-chain"
        assert header["n_particles"] == 4
        assert header["config"] == cfg.raw

    def test_record_count_matches_steps(self, completed):
        _, art = completed
        _, trace = read_trace(art.trace_path)
        assert len(trace.records) == 121
        assert trace.stage_bounds == [(0, 121)]

    def test_violation_samples_present(self, completed):
        _, art = completed
        _, trace = read_trace(art.trace_path)
        steps = [rec for rec, _ in trace.violation_samples]
        assert steps == [0, 40, 80]
        assert art.summary["violation_samples"] == [
            {"record": r, "rate": rate} for r, rate in trace.violation_samples
        ]

    def test_wall_times_only_in_summary(self, completed):
        _, art = completed
        assert "wall_times" in art.summary
        assert "wall_time" not in art.trace_path.read_text()


class TestReproducibility:
    def test_rerun_trace_byte_identical(self, completed):
        cfg, art = completed
        first = art.trace_path.read_bytes()
        again = run_experiment(cfg)
        assert again.trace_path.read_bytes() == first

    def test_rerun_plots_byte_identical(self, completed):
        cfg, art = completed
        saved = {k: p.read_bytes() for k, p in art.plot_paths.items()}
        again = run_experiment(cfg)
        for k, p in again.plot_paths.items():
            assert p.read_bytes() == saved[k]

    def test_different_seed_changes_trace(self, completed, tmp_path):
        cfg, art = completed
        doc = small_doc(tmp_path / "other")
        other = run_experiment(parse_config(doc, "fixture", seed=4))
        assert other.trace_path.read_bytes() != art.trace_path.read_bytes()


class TestOfflineVerdicts:
    def test_roundtrip_equals_summary(self, completed):
        _, art = completed
        assert verdicts_from_trace(art.trace_path) == art.summary["verdicts"]

    def test_read_trace_restores_series(self, completed):
        _, art = completed
        _, trace = read_trace(art.trace_path)
        objs = trace.objectives()
        assert objs[0] == art.summary["objectives"]["initial"]
        assert objs[-1] == art.summary["objectives"]["final"]
        assert trace.positions.shape == (121, 4, 1)

    def test_read_trace_rejects_missing_header(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"kind": "record"}\n')
        with pytest.raises(FlowError, match="header"):
            read_trace(bad)

    def test_read_trace_rejects_unknown_schema(self, tmp_path, completed):
        _, art = completed
        lines = art.trace_path.read_text().splitlines()
        header = json.loads(lines[0])
        header["trace_schema"] = 999
        bad = tmp_path / "schema.jsonl"
        bad.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
        with pytest.raises(FlowError, match="schema"):
            read_trace(bad)


class TestDryRun:
    def test_no_files_written(self, tmp_path):
        out = tmp_path / "dry"
        cfg = parse_config(small_doc(out), "dry")
        art = run_experiment(cfg, dry_run=True)
        assert art.status == 0
        assert not out.exists()
        assert art.summary["dry_run"] is True
        assert art.summary["config"] == cfg.raw


class TestAbort:
    def test_partial_artifacts_and_status(self, tmp_path):
        doc = {
            "env": {"key": "safe-chain"},
            "schedule": {
                "preset": "strong_regularization",
                "params": {"kappa": 0.0, "sigma": 0.4},
            },
            "flow": {"h": 1e307, "steps_per_stage": 8},
            "policy": {
                "n_particles": 4,
                "dim": 1,
                "feature_params": {"seed": 7, "bound": 50.0},
            },
            "out_dir": str(tmp_path / "abort"),
            "seed": 0,
        }
        cfg = parse_config(doc, "abort")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            art = run_experiment(cfg)
        assert art.status == 1
        assert art.summary["aborted"] is True
        assert art.summary["abort_reason"]
        header, trace = read_trace(art.trace_path)
        assert header["aborted"] is True
        assert trace.aborted is True
        assert 0 < len(trace.records) < 9
        v = verdicts_from_trace(art.trace_path)
        assert v["completed"] is False
        assert v == art.summary["verdicts"]


class TestEpiVerdicts:
    def test_stagewise_improvement_computed(self, tmp_path):
        doc = {
            "env": {"key": "safe-chain"},
            "schedule": {
                "preset": "epi_convergence",
                "params": {"kappa0": 0.2, "sigma0": 1.6},
            },
            "flow": {"h": 0.005, "steps_per_stage": [40, 40, 40, 40]},
            "policy": {
                "n_particles": 4,
                "dim": 1,
                "feature_params": {"seed": 7},
            },
            "out_dir": str(tmp_path / "epi"),
            "seed": 1,
        }
        art = run_experiment(parse_config(doc, "epi"))
        v = art.summary["verdicts"]
        assert v["stagewise_improvement"]["pass"] in (True, False)
        assert len(v["stagewise_improvement"]["stage_best"]) == 4
        assert v["lambda_j_positive"]["pass"] is None
        assert v["exponential_decay"]["pass"] is None
        assert verdicts_from_trace(art.trace_path) == v
