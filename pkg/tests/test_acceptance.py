"""Acceptance suite: all ten criteria at their stated tolerances.

One full report is computed per session and shared across the criterion
tests; fault-injection and usage-error paths run on their own because they
must fail independently of the shared artifacts.
"""

import json

import pytest

from meanflow.acceptance import (
    AcceptanceReport,
    acceptance_report,
    criterion_gradient_check,
    run_shipped,
)
from meanflow.config import ConfigError, shipped_config_dir


@pytest.fixture(scope="session")
def report(tmp_path_factory) -> AcceptanceReport:
    out = tmp_path_factory.mktemp("acceptance")
    return acceptance_report(out_root=out)


class TestGradientCheck:
    def test_passes_within_budget(self, report):
        r = report.criterion(1)
        assert r.passed
        assert r.runtime_s <= 120.0

    def test_both_envs_at_tolerance(self, report):
        per_env = report.criterion(1).measured["per_env"]
        assert set(per_env) == {"safe-chain", "safe-resource"}
        for entry in per_env.values():
            assert entry["max_rel_error"] <= 1e-3
            assert entry["probes"] >= 50


class TestEnergyIdentity:
    def test_passes_within_budget(self, report):
        r = report.criterion(2)
        assert r.passed
        assert r.runtime_s <= 300.0

    def test_residuals_and_order(self, report):
        m = report.criterion(2).measured
        assert m["step_sizes"] == [1e-2, 5e-3, 2.5e-3]
        assert m["residuals"][0] <= 0.10
        assert m["residuals"][0] > m["residuals"][1] > m["residuals"][2]
        assert m["order"] >= 0.8


class TestMonotoneDescent:
    def test_every_shipped_run(self, report):
        r = report.criterion(3)
        assert r.passed
        per_run = r.measured["per_run"]
        assert len(per_run) == 6
        for entry in per_run.values():
            assert entry["completed"]
            assert entry["monotone"]
            assert entry["gate"]
            assert entry["worst_increase"] <= 1e-10
            assert entry["h"] <= 0.5 / entry["l_field_max"]


class TestExponentialRate:
    def test_passes_within_budget(self, report):
        r = report.criterion(4)
        assert r.passed
        assert r.runtime_s <= 600.0

    def test_rates_fits_and_two_inits(self, report):
        per_env = report.criterion(4).measured["per_env"]
        assert set(per_env) == {"safe-chain", "safe-resource"}
        for entry in per_env.values():
            assert all(lam > 0 for lam in entry["lambda_j"])
            assert entry["r2_j"] >= 0.95
            assert entry["r2_w2"] >= 0.95
            assert 0.7 <= entry["rate_ratio"] <= 1.3
            assert entry["w2_two_inits"] <= 0.05


class TestStagedApproach:
    def test_passes_within_budget(self, report):
        r = report.criterion(5)
        assert r.passed
        assert r.runtime_s <= 600.0

    def test_gap_and_stagewise(self, report):
        m = report.criterion(5).measured
        assert m["schedule_ladder_ok"]
        assert m["relative_gap"] <= 0.05
        assert m["stagewise_improvement"]
        bests = m["stage_best"]
        assert len(bests) == 4
        assert all(b < a for a, b in zip(bests, bests[1:]))


class TestSafety:
    def test_rates(self, report):
        r = report.criterion(6)
        assert r.passed
        rates = r.measured["rates"]
        assert r.measured["n_rollouts"] == 10_000
        assert r.measured["horizon"] == 100
        assert rates["chain-epi"] <= 1e-3
        assert rates["resource-epi"] <= 1e-3
        assert rates["chain-epi-nobarrier"] > rates["chain-epi"]


class TestPolicyIdentities:
    def test_thousand_draws(self, report):
        r = report.criterion(7)
        assert r.passed
        m = r.measured
        assert m["draws"] == 1000
        assert m["max_normalization_error"] <= 1e-10
        assert m["max_density_bound_violation"] <= 1e-12
        assert m["max_zero_mass_error"] <= 1e-12
        assert m["max_gradient_bound_ratio"] <= 1.0


class TestDivergenceOracle:
    def test_closed_forms(self, report):
        r = report.criterion(8)
        assert r.passed
        m = r.measured
        assert abs(m["kl_quadrature"] - 0.5) <= 0.1
        assert m["quadratic_identity_error"] <= 1e-10
        assert m["grad_fd_max_rel_error"] <= 1e-3


class TestTransportMetrics:
    def test_brute_force_and_identities(self, report):
        r = report.criterion(9)
        assert r.passed
        m = r.measured
        assert m["trials"] == 100
        assert m["max_brute_force_gap"] <= 1e-12
        assert m["max_1d_gap"] <= 1e-12
        assert m["max_identity_gap"] <= 1e-10


class TestBudgetEquivalence:
    def test_exact_agreement(self, report):
        r = report.criterion(10)
        assert r.passed
        m = r.measured
        assert m["trajectories"] == 1000
        assert m["agreements"] == 1000
        assert m["violations_seen"] > 0


class TestReport:
    def test_all_criteria_pass(self, report):
        assert report.all_passed
        assert [r.index for r in report.results] == list(range(1, 11))

    def test_runs_completed(self, report):
        assert set(report.run_status.values()) == {0}
        assert len(report.run_status) == 7

    def test_report_file_round_trips(self, report):
        from pathlib import Path

        doc = json.loads((Path(report.out_root) / "acceptance.json").read_text())
        assert doc["all_passed"] is True
        assert len(doc["results"]) == 10
        assert doc["results"][0]["name"] == "gradient-check"


class TestFaultInjection:
    def test_sign_flip_fails_gradient_check(self):
        r = criterion_gradient_check(gradient_hook=lambda g: -g)
        assert not r.passed
        for entry in r.measured["per_env"].values():
            assert entry["max_rel_error"] > 1.0


class TestUsageErrors:
    def test_empty_dir_rejected(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(ConfigError, match="no experiment files"):
            acceptance_report(config_dir=empty, out_root=tmp_path / "out")

    def test_missing_experiment_file_rejected(self, tmp_path):
        partial = tmp_path / "partial"
        partial.mkdir()
        src = shipped_config_dir() / "safe-chain-strong.json"
        (partial / "safe-chain-strong.json").write_text(src.read_text())
        with pytest.raises(ConfigError, match="missing experiment file"):
            run_shipped(partial, tmp_path / "out")
