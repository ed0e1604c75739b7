"""Config schema: defaults, presets, violation collection, hashing."""

import json

import pytest

from meanflow.config import (
    EPI_REWARD_WEIGHTS,
    EPI_TRUNCATIONS,
    PRESETS,
    ConfigError,
    config_hash,
    load_config,
    parse_config,
)


def minimal_doc(**extra):
    doc = {"env": {"key": "safe-chain"},
           "schedule": {"preset": "strong_regularization"}}
    doc.update(extra)
    return doc


def violations_of(doc, **kwargs):
    with pytest.raises(ConfigError) as info:
        parse_config(doc, **kwargs)
    return info.value.violations


class TestDefaults:
    def test_minimal_document_fills_defaults(self):
        cfg = parse_config(minimal_doc(), "mini")
        assert cfg.name == "mini"
        assert cfg.out_dir == "runs/mini"
        assert cfg.seed == 0
        assert cfg.flow.h == 0.01
        assert cfg.flow.steps_per_stage == (500,)
        assert cfg.flow.n_particles == 16
        assert cfg.flow.dim == 1
        assert cfg.flow.reward_variant == "entropy"
        assert cfg.flow.param_variant == "kl"
        assert cfg.flow.prior_key == "gaussian"
        assert cfg.raw["schema_version"] == 1
        assert cfg.raw["flow"]["h"] == 0.01

    def test_presets_registry(self):
        assert set(PRESETS) == {"strong_regularization", "epi_convergence"}

    def test_strong_preset_single_stage(self):
        cfg = parse_config(minimal_doc(), "mini")
        (stage,) = cfg.flow.stages
        assert (stage.m, stage.eps, stage.kappa, stage.sigma) == (5.0, 0.05, 6.0, 0.5)

    def test_epi_preset_schedule_tables(self):
        doc = minimal_doc()
        doc["schedule"] = {"preset": "epi_convergence",
                           "params": {"kappa0": 0.4, "sigma0": 0.8}}
        doc["policy"] = {"dim": 2}
        cfg = parse_config(doc, "epi")
        stages = cfg.flow.stages
        assert tuple(s.m for s in stages) == EPI_TRUNCATIONS == (1.0, 2.0, 5.0, 10.0)
        assert tuple(s.eps for s in stages) == EPI_REWARD_WEIGHTS
        assert [s.kappa for s in stages] == [0.4, 0.2, 0.1, 0.05]
        assert [s.sigma for s in stages] == [0.8, 0.4, 0.2, 0.1]

    def test_schedule_param_override(self):
        doc = minimal_doc()
        doc["schedule"]["params"] = {"kappa": 8.0}
        cfg = parse_config(doc, "mini")
        assert cfg.flow.stages[0].kappa == 8.0
        assert cfg.raw["schedule"]["params"]["kappa"] == 8.0


class TestViolations:
    def test_all_violations_collected(self):
        doc = minimal_doc()
        doc["flow"] = {"h": 0.0}
        doc["policy"] = {"n_particles": 0}
        doc["env"] = {"key": "no-such-env"}
        found = violations_of(doc)
        assert any(v.startswith("flow.h:") for v in found)
        assert any(v.startswith("policy.n_particles:") for v in found)
        assert any(v.startswith("env:") for v in found)
        assert len(found) == 3

    def test_missing_required_fields(self):
        found = violations_of({})
        assert any(v.startswith("env.key: required") for v in found)
        assert any(v.startswith("schedule.preset: required") for v in found)

    def test_unknown_section_and_fields(self):
        doc = minimal_doc(extra_section={})
        doc["env"]["typo"] = 1
        doc["flow"] = {"step": 0.1}
        found = violations_of(doc)
        assert any(v.startswith("extra_section:") for v in found)
        assert any(v.startswith("env.typo:") for v in found)
        assert any(v.startswith("flow.step:") for v in found)

    def test_barrier_cap_clamp_visibility(self):
        doc = minimal_doc()
        doc["env"]["overrides"] = {"m_bar": 6.5}
        found = violations_of(doc)
        assert len(found) == 1
        assert found[0].startswith("env.overrides.m_bar:")
        assert "7.0" in found[0]

    def test_barrier_cap_exactly_at_threshold_passes(self):
        doc = minimal_doc()
        doc["env"]["overrides"] = {"m_bar": 7.0}
        cfg = parse_config(doc)
        assert cfg.env_overrides == {"m_bar": 7.0}

    def test_dim_capped_by_quadrature_when_kappa_positive(self):
        doc = minimal_doc()
        doc["policy"] = {"dim": 3}
        found = violations_of(doc)
        assert len(found) == 1 and found[0].startswith("policy.dim:")

    def test_kappa_zero_lifts_dim_cap(self):
        doc = minimal_doc()
        doc["policy"] = {"dim": 3}
        doc["schedule"]["params"] = {"kappa": 0.0}
        cfg = parse_config(doc)
        assert cfg.flow.dim == 3

    def test_fast_path_needs_entropy_variant(self):
        doc = minimal_doc()
        doc["regularizers"] = {"reward_variant": "power", "reward_power": 2.0}
        doc["flow"] = {"entropy_fast_path": True}
        found = violations_of(doc)
        assert len(found) == 1 and found[0].startswith("flow.entropy_fast_path:")

    def test_power_variant_requires_exponent(self):
        doc = minimal_doc()
        doc["regularizers"] = {"reward_variant": "power"}
        found = violations_of(doc)
        assert len(found) == 1 and found[0].startswith("regularizers.reward_variant:")

    def test_steps_per_stage_length_mismatch(self):
        doc = minimal_doc()
        doc["flow"] = {"steps_per_stage": [10, 20]}
        found = violations_of(doc)
        assert len(found) == 1
        assert found[0].startswith("flow.steps_per_stage:")

    def test_unknown_preset_parameter(self):
        doc = minimal_doc()
        doc["schedule"]["params"] = {"kappa0": 0.1}
        found = violations_of(doc)
        assert found[0].startswith("schedule.params.kappa0:")

    def test_bool_rejected_for_numeric_field(self):
        doc = minimal_doc()
        doc["flow"] = {"h": True}
        found = violations_of(doc)
        assert len(found) == 1 and found[0].startswith("flow.h:")

    def test_feature_params_validated_against_registry(self):
        doc = minimal_doc()
        doc["policy"] = {"feature_params": {"no_such_knob": 1.0}}
        found = violations_of(doc)
        assert len(found) == 1 and found[0].startswith("policy.feature_params:")


class TestHashing:
    def test_same_document_same_hash(self):
        a = parse_config(minimal_doc(), "x")
        b = parse_config(minimal_doc(), "x")
        assert config_hash(a) == config_hash(b)
        assert len(config_hash(a)) == 64

    def test_seed_override_changes_hash_and_echo(self):
        base = parse_config(minimal_doc(), "x")
        other = parse_config(minimal_doc(), "x", seed=9)
        assert other.seed == 9
        assert other.flow.seed == 9
        assert other.raw["seed"] == 9
        assert config_hash(base) != config_hash(other)

    def test_out_dir_override(self):
        cfg = parse_config(minimal_doc(), "x", out_dir="elsewhere/run1")
        assert cfg.out_dir == "elsewhere/run1"
        assert cfg.raw["out_dir"] == "elsewhere/run1"

    def test_key_order_does_not_matter(self):
        doc_a = {"schedule": {"preset": "strong_regularization"},
                 "env": {"key": "safe-chain"}, "seed": 3}
        doc_b = {"seed": 3, "env": {"key": "safe-chain"},
                 "schedule": {"preset": "strong_regularization"}}
        assert config_hash(parse_config(doc_a, "x")) == config_hash(
            parse_config(doc_b, "x")
        )


class TestLoadConfig:
    def test_round_trip_from_file(self, tmp_path):
        path = tmp_path / "run-a.json"
        path.write_text(json.dumps(minimal_doc(seed=4)))
        cfg = load_config(path)
        assert cfg.name == "run-a"
        assert cfg.seed == 4
        assert cfg.out_dir == "runs/run-a"

    def test_invalid_json_reports_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert "broken.json" in info.value.violations[0]
        assert "JSON" in info.value.violations[0]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="unreadable"):
            load_config(tmp_path / "absent.json")

    def test_non_object_top_level(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="JSON object"):
            load_config(path)

    def test_cli_style_overrides(self, tmp_path):
        path = tmp_path / "run-b.json"
        path.write_text(json.dumps(minimal_doc()))
        cfg = load_config(path, seed=11, out_dir=str(tmp_path / "out"))
        assert cfg.seed == 11
        assert cfg.out_dir == str(tmp_path / "out")
