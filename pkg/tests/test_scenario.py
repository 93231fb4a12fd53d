import json
from dataclasses import replace

import numpy as np
import pytest

from gridgame import fixture_path
from gridgame.bdd import MlpDetector, MlpLayer, SeDetector
from gridgame.errors import CalibrationMismatchError, ConfigError
from gridgame.game import game_matrix_from_csv
from gridgame.scenario import (
    average_attacker_utility,
    awareness_experiment,
    experiment_config_from_dict,
    load_experiment_config,
    run_full_pipeline,
    split_support_key,
    substream,
    write_reports,
)

FAST_OVERRIDES = {
    "mlp": {"hidden": [16, 8], "epochs": 120, "learning_rate": 0.05,
            "batch_size": 32, "normalize": True},
    "dataset": {"n_total": 2000, "zeta_star": 6.0, "support_sizes": [1, 2]},
    "calibration": {"n_safe": 600, "n_holdout": 600},
    "awareness": {"n_trials": 300},
}


def fast_config(seed=7, **extra):
    import tomli

    raw = tomli.loads(fixture_path("pjm5_experiment.toml").read_text())
    raw.update(FAST_OVERRIDES)
    raw["seed"] = seed
    raw.update(extra)
    return experiment_config_from_dict(raw, base_dir=fixture_path("."))


@pytest.fixture(scope="module")
def fast_result():
    return run_full_pipeline(fast_config())


class TestConfigLoading:
    def test_toml_fixture_loads(self):
        cfg = load_experiment_config(fixture_path("pjm5_experiment.toml"))
        assert cfg.target_line == (2, 3)
        assert cfg.candidate_meters == ("z1", "z4", "z5", "z10")
        assert cfg.thresholds[frozenset({"z5", "z10"})] == pytest.approx(9.48)
        assert len(cfg.action_sets()) == 6

    def test_json_equivalent(self, tmp_path):
        import tomli

        raw = tomli.loads(fixture_path("pjm5_experiment.toml").read_text())
        p = tmp_path / "exp.json"
        p.write_text(json.dumps(raw))
        (tmp_path / "pjm5.json").write_text(fixture_path("pjm5.json").read_text())
        cfg_json = load_experiment_config(p)
        cfg_toml = load_experiment_config(fixture_path("pjm5_experiment.toml"))
        assert cfg_json.target_line == cfg_toml.target_line
        assert cfg_json.thresholds == cfg_toml.thresholds
        assert cfg_json.mlp_hidden == cfg_toml.mlp_hidden

    def test_empty_candidates_rejected_before_compute(self):
        with pytest.raises(ConfigError):
            fast_config(candidate_meters=[])

    def test_missing_operating_point_rejected(self):
        import tomli

        raw = tomli.loads(fixture_path("pjm5_experiment.toml").read_text())
        raw.pop("load_profile")
        with pytest.raises(ConfigError):
            experiment_config_from_dict(raw, base_dir=fixture_path("."))

    def test_overrides_win(self):
        cfg = load_experiment_config(
            fixture_path("pjm5_experiment.toml"), overrides={"seed": 99, "detector": "se"}
        )
        assert cfg.seed == 99
        assert cfg.detector == "se"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(tmp_path / "none.toml")

    def test_split_support_key(self):
        assert split_support_key("z1z10") == frozenset({"z1", "z10"})
        assert split_support_key("z4") == frozenset({"z4"})
        with pytest.raises(ConfigError):
            split_support_key("zz-")

    def test_substream_stable_and_distinct(self):
        assert substream(7, "dataset") == substream(7, "dataset")
        assert substream(7, "dataset") != substream(7, "training")
        assert substream(7, "dataset") != substream(8, "dataset")


class TestPipeline:
    def test_mean_payoff_ordering(self, fast_result):
        means = fast_result.manifest["mean_payoff_mw"]
        assert means["mlp"] < means["se"]

    def test_se_game_uses_configured_budgets(self, fast_result):
        # utilities computed from the configured budget table are seed-free
        gm = fast_result.game_se
        assert gm.row_labels == ("z1z4", "z1z5", "z1z10", "z4z5", "z4z10", "z5z10")
        other = run_full_pipeline(fast_config(seed=8))
        np.testing.assert_allclose(gm.S, other.game_se.S, atol=1e-12)

    def test_strategies_close_duality(self, fast_result):
        for det in ("se", "mlp"):
            q = fast_result.strategies[(det, "defender")]
            u = fast_result.strategies[(det, "attacker")]
            assert q.game_value == pytest.approx(u.game_value, abs=1e-6)

    def test_awareness_orderings(self, fast_result):
        r = fast_result.awareness.rates
        assert r[("mlp", "unaware")] > r[("mlp", "aware")]
        assert r[("se", "aware")] > r[("se", "unaware")]

    def test_calibration_rates_match(self, fast_result):
        rec = fast_result.calibration[0]
        assert abs(rec.fa_se - rec.fa_mlp) <= 2.0 / np.sqrt(rec.n_samples) + 0.01

    def test_manifest_provenance(self, fast_result):
        man = fast_result.manifest
        assert man["master_seed"] == 7
        assert len(man["config_digest"]) == 16
        assert man["package_version"]
        assert "dataset" in man["substreams"]

    def test_stage_label_on_failure(self, tmp_path):
        cfg = fast_config()
        bad = replace(cfg, case_path=str(tmp_path / "missing.json"))
        with pytest.raises(Exception, match=r"\[stage load-case\]"):
            run_full_pipeline(bad)

    def test_detector_restriction_se(self):
        res = run_full_pipeline(fast_config(detector="se"))
        assert res.game_mlp is None
        assert res.awareness is None
        assert res.game_se is not None
        assert res.manifest["detector_restriction"] == "se"


class TestReports:
    def test_byte_identical_reruns(self, tmp_path):
        cfg = fast_config()
        a = run_full_pipeline(cfg)
        b = run_full_pipeline(cfg)
        out_a = write_reports(a, tmp_path / "a")
        out_b = write_reports(b, tmp_path / "b")
        files_a = sorted(p.relative_to(out_a) for p in out_a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(out_b) for p in out_b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes(), rel

    def test_report_contents(self, fast_result, tmp_path):
        out = write_reports(fast_result, tmp_path / "run")
        expected = {
            "calibration.csv", "game_se.csv", "game_mlp.csv", "strategies.json",
            "awareness.csv", "manifest.json", "detector_mlp.json",
        }
        present = {p.name for p in out.iterdir() if p.is_file()}
        assert expected <= present
        assert (out / "plotdata" / "strategy_probabilities.csv").exists()
        assert (out / "plotdata" / "payoff_cells.csv").exists()
        man = json.loads((out / "manifest.json").read_text())
        assert "plotdata/detection_rates.csv" in man["files"]
        gm = game_matrix_from_csv((out / "game_se.csv").read_text())
        np.testing.assert_allclose(gm.S, fast_result.game_se.S, rtol=1e-9)

    def test_calibration_csv_header(self, fast_result, tmp_path):
        out = write_reports(fast_result, tmp_path / "run")
        header = (out / "calibration.csv").read_text().splitlines()[0]
        assert header == "support,zeta_mw,fa_mlp,fa_se,n_samples,seed"


class TestAwarenessExperiment:
    def test_mismatched_detectors_rejected(self, pjm5, pjm5_model, pjm5_partition):
        _, meters = pjm5
        # a net alarming on everything vs a residual detector alarming on nothing
        always = MlpDetector(
            layers=(MlpLayer(np.zeros((1, 11)), np.array([3.0]), "sigmoid"),),
            input_offset=np.zeros(11),
            input_scale=np.ones(11),
        )
        se = SeDetector(model=pjm5_model, zeta=1e9)
        ctx = {"model": pjm5_model, "meters": meters, "partition": pjm5_partition,
               "x0": np.zeros(4), "noise_sigma": 1.0}
        with pytest.raises(CalibrationMismatchError):
            awareness_experiment(ctx, se, always, ["z1", "z4"], 50, seed=0)

    def test_threaded_matches_sequential(self, pjm5, pjm5_model, pjm5_partition, fast_result):
        _, meters = pjm5
        ctx = {"model": pjm5_model, "meters": meters, "partition": pjm5_partition,
               "x0": fast_result.x0, "noise_sigma": 1.0}
        from gridgame.attack import MlpAttackConfig

        cfg = MlpAttackConfig(model=pjm5_model, reference_zeta=fast_result.se_detector.zeta)
        seq = awareness_experiment(
            ctx, fast_result.se_detector, fast_result.mlp, ["z1", "z4", "z5", "z10"],
            200, seed=5, mlp_config=cfg, threads=1,
        )
        par = awareness_experiment(
            ctx, fast_result.se_detector, fast_result.mlp, ["z1", "z4", "z5", "z10"],
            200, seed=5, mlp_config=cfg, threads=4,
        )
        assert seq.rates == par.rates


class TestAverageUtility:
    def test_reference_tables(self):
        t2 = game_matrix_from_csv(fixture_path("table2.csv").read_text())
        t3 = game_matrix_from_csv(fixture_path("table3.csv").read_text())
        assert average_attacker_utility(t2) == pytest.approx(np.sum(t2.S) / 36)
        assert 4.72 <= average_attacker_utility(t2) <= 4.82
        assert 0.76 <= average_attacker_utility(t3) <= 0.92

    def test_zero_matrix(self):
        from gridgame.game import GameMatrix

        gm = GameMatrix(row_labels=("a",), col_labels=("b",), S=np.zeros((1, 1)))
        assert average_attacker_utility(gm) == 0.0
