"""Experiment orchestration and the command-line interface."""

import json

import pytest
import yaml

from dermfair.backbones import BackboneFamily, BackboneSpec
from dermfair.cli import build_parser, main
from dermfair.errors import ConfigurationError
from dermfair.experiment import (
    DATA_ROOT_ENV,
    ExperimentConfig,
    load_config_dict,
    run,
)
from dermfair.models import Variant
from dermfair.records import DataSource
from dermfair.synthetic import SyntheticSpec

SMALL = {"family": "small_cnn"}


def minimal_payload(out_dir, **overrides):
    payload = {
        "task": "cancer",
        "out_dir": str(out_dir),
        "backbones": [SMALL],
        "variants": ["baseline"],
        "n_splits": 1,
        "synthetic": {"n_per_cell": 3, "image_size": 16, "rho": 0.0, "seed": 1},
        "synthetic_test_n_per_cell": 2,
        "train": {"epochs": 1, "batch_size": 4},
    }
    payload.update(overrides)
    return payload


class TestConfigFiles:
    def test_include_merging(self, tmp_path):
        (tmp_path / "base.yaml").write_text(
            yaml.safe_dump({"task": "cancer", "train": {"epochs": 4, "batch_size": 8}})
        )
        (tmp_path / "exp.yaml").write_text(
            yaml.safe_dump({"include": "base.yaml", "train": {"epochs": 2}})
        )
        merged = load_config_dict(tmp_path / "exp.yaml")
        assert merged["task"] == "cancer"
        assert merged["train"] == {"epochs": 2, "batch_size": 8}  # deep merge

    def test_later_include_wins(self, tmp_path):
        (tmp_path / "a.yaml").write_text(yaml.safe_dump({"task": "cancer", "n_splits": 5}))
        (tmp_path / "b.yaml").write_text(yaml.safe_dump({"n_splits": 2}))
        (tmp_path / "exp.yaml").write_text(yaml.safe_dump({"include": ["a.yaml", "b.yaml"]}))
        merged = load_config_dict(tmp_path / "exp.yaml")
        assert merged["n_splits"] == 2

    def test_missing_file_fatal(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            load_config_dict(tmp_path / "absent.yaml")

    def test_non_mapping_root_fatal(self, tmp_path):
        (tmp_path / "bad.yaml").write_text("- just\n- a list\n")
        with pytest.raises(ConfigurationError, match="mapping"):
            load_config_dict(tmp_path / "bad.yaml")


class TestExperimentConfig:
    def test_from_dict_round(self, tmp_path):
        config = ExperimentConfig.from_dict(minimal_payload(tmp_path / "out"))
        assert config.task == "cancer"
        assert config.variants == [Variant.BASELINE]
        assert config.backbones[0].family is BackboneFamily.SMALL_CNN
        assert config.synthetic == SyntheticSpec(n_per_cell=3, image_size=16, rho=0.0, seed=1)

    def test_out_dir_required(self, tmp_path):
        payload = minimal_payload(tmp_path / "out")
        del payload["out_dir"]
        with pytest.raises(ConfigurationError, match="out_dir"):
            ExperimentConfig.from_dict(payload)

    def test_out_dir_override_wins(self, tmp_path):
        config = ExperimentConfig.from_dict(
            minimal_payload(tmp_path / "a"), out_dir=tmp_path / "b"
        )
        assert config.out_dir == tmp_path / "b"

    def test_unknown_task_fatal(self, tmp_path):
        with pytest.raises(ConfigurationError, match="unknown task"):
            ExperimentConfig.from_dict(minimal_payload(tmp_path, task="melanoma"))

    def test_external_pairing_enforced(self, tmp_path):
        payload = minimal_payload(tmp_path, external_source="scin")
        with pytest.raises(ConfigurationError, match="cannot test externally"):
            ExperimentConfig.from_dict(payload)

    def test_synthetic_train_requires_synthetic_external(self, tmp_path):
        payload = minimal_payload(tmp_path, external_source="padufes")
        payload["train_source"] = "synthetic"
        with pytest.raises(ConfigurationError, match="synthetic"):
            ExperimentConfig.from_dict(payload)

    def test_backbone_required(self, tmp_path):
        with pytest.raises(ConfigurationError, match="backbone"):
            ExperimentConfig.from_dict(minimal_payload(tmp_path, backbones=[]))

    def test_unknown_weight_fatal(self, tmp_path):
        payload = minimal_payload(tmp_path, weights={"gamma_mystery": 1.0})
        with pytest.raises(ConfigurationError, match="unknown loss weights"):
            ExperimentConfig.from_dict(payload)

    def test_env_var_overrides_dataset_root(self, tmp_path, monkeypatch):
        config = ExperimentConfig.from_dict(minimal_payload(tmp_path / "out"))
        config.dataset_root = tmp_path / "configured"
        monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path / "env"))
        assert config.data_root() == tmp_path / "env"
        assert config.resolve_path("x.csv") == tmp_path / "env" / "x.csv"
        monkeypatch.delenv(DATA_ROOT_ENV)
        assert config.data_root() == tmp_path / "configured"

    def test_absolute_paths_bypass_root(self, tmp_path):
        config = ExperimentConfig.from_dict(minimal_payload(tmp_path / "out"))
        assert config.resolve_path(tmp_path / "abs.csv") == tmp_path / "abs.csv"


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One full baseline+TABE matrix over the tiny synthetic source."""
    out = tmp_path_factory.mktemp("exp") / "out"
    config = ExperimentConfig.from_dict(
        minimal_payload(out, variants=["baseline", "tabe"])
    )
    return run(config), out


class TestRunMatrix:
    def test_everything_succeeded(self, tiny_run):
        result, _ = tiny_run
        assert result.ok, [o.error for o in result.failures()]
        assert len(result.outcomes) == 2  # 1 backbone × 2 variants × 1 split

    def test_directory_layout(self, tiny_run):
        _, out = tiny_run
        for variant in ("baseline", "tabe"):
            run_dir = out / "runs" / "small_cnn" / variant / "split0"
            for name in (
                "manifest.json",
                "best.pt",
                "predictions_internal.csv",
                "predictions_external.csv",
                "report_internal.json",
                "report_external.json",
            ):
                assert (run_dir / name).exists(), f"{variant}/{name}"

    def test_aggregated_artifacts(self, tiny_run):
        result, out = tiny_run
        reports = out / "reports"
        assert (reports / "aggregated_rows.json").exists()
        assert (reports / "table_eom.txt").exists()
        assert (reports / "table_balanced_accuracy.txt").exists()
        for ext in (".svg", ".png", ".csv"):
            assert (reports / "tradeoff_eom").with_suffix(ext).exists()
        assert set(result.artifacts) >= {"table_eom", "svg", "png", "csv"}

    def test_rows_cover_matrix(self, tiny_run):
        result, _ = tiny_run
        keys = {(r.variant, r.eval_set) for r in result.rows}
        assert keys == {
            ("baseline", "internal"),
            ("baseline", "external"),
            ("tabe", "internal"),
            ("tabe", "external"),
        }

    def test_failures_file_empty(self, tiny_run):
        _, out = tiny_run
        assert json.loads((out / "failures.json").read_text()) == []

    def test_table_mentions_variants(self, tiny_run):
        _, out = tiny_run
        table = (out / "reports" / "table_eom.txt").read_text()
        assert "baseline" in table and "tabe" in table

    def test_failed_subrun_isolated(self, tmp_path):
        bad_backbone = {"family": "small_cnn", "weights_path": str(tmp_path / "missing.pt")}
        config = ExperimentConfig.from_dict(
            minimal_payload(tmp_path / "out", backbones=[SMALL, bad_backbone])
        )
        result = run(config)
        assert not result.ok
        assert len(result.outcomes) == 2
        assert len(result.failures()) == 1
        recorded = json.loads((tmp_path / "out" / "failures.json").read_text())
        assert len(recorded) == 1 and "missing.pt" in recorded[0]["error"]
        # the healthy sub-run still produced its report
        assert (tmp_path / "out" / "runs" / "small_cnn" / "baseline" / "split0" / "report_external.json").exists()

    def test_parallel_threads_match_serial(self, tmp_path):
        config = ExperimentConfig.from_dict(
            minimal_payload(tmp_path / "out", variants=["baseline"], parallel=2)
        )
        result = run(config)
        assert result.ok


class TestCli:
    def test_verbs_registered(self):
        parser = build_parser()
        subparsers = next(
            a for a in parser._actions if isinstance(a, type(parser._subparsers._group_actions[0]))
        )
        verbs = set(subparsers.choices)
        assert verbs == {"ingest", "split", "train", "evaluate", "report", "plot", "synthetic", "run"}

    def test_synthetic_verb(self, tmp_path, capsys):
        code = main(
            [
                "synthetic",
                "--n-per-cell", "2",
                "--image-size", "16",
                "--rho", "0.0",
                "--seed", "3",
                "--out", str(tmp_path / "pool"),
            ]
        )
        assert code == 0
        assert (tmp_path / "pool" / "manifest.csv").exists()
        assert "24 images" in capsys.readouterr().out

    def test_ingest_then_split(self, tmp_path, capsys):
        assert main(
            [
                "synthetic",
                "--n-per-cell", "4",
                "--image-size", "16",
                "--seed", "2",
                "--out", str(tmp_path / "pool"),
            ]
        ) == 0
        assert main(
            [
                "ingest",
                "--source", "synthetic",
                "--manifest", str(tmp_path / "pool" / "manifest.csv"),
                "--images", str(tmp_path / "pool" / "images"),
                "--out", str(tmp_path / "ingested"),
            ]
        ) == 0
        assert (tmp_path / "ingested" / "records.csv").exists()
        assert (tmp_path / "ingested" / "tone_table.csv").exists()
        assert main(
            [
                "split",
                "--records", str(tmp_path / "ingested" / "records.csv"),
                "--task", "cancer",
                "--n-splits", "2",
                "--seed", "1",
                "--out", str(tmp_path / "splits"),
            ]
        ) == 0
        assert (tmp_path / "splits" / "split0.csv").exists()
        assert (tmp_path / "splits" / "split1.csv").exists()

    def test_run_verb_from_config(self, tmp_path, capsys):
        config_path = tmp_path / "exp.yaml"
        config_path.write_text(yaml.safe_dump(minimal_payload(tmp_path / "out")))
        code = main(["run", "--config", str(config_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "split0: ok" in out
        assert (tmp_path / "out" / "reports" / "table_eom.txt").exists()

    def test_variant_filter_unknown_is_error(self, tmp_path, capsys):
        config_path = tmp_path / "exp.yaml"
        config_path.write_text(yaml.safe_dump(minimal_payload(tmp_path / "out")))
        code = main(["run", "--config", str(config_path), "--variant", "mystery"])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_config_is_error_exit(self, capsys):
        assert main(["run"]) == 2
        assert "--config" in capsys.readouterr().err

    def test_report_and_plot_verbs(self, tiny_run, tmp_path, capsys):
        _, out = tiny_run
        assert main(
            ["report", "--results", str(out), "--metric", "eom", "--out", str(tmp_path / "rep")]
        ) == 0
        assert (tmp_path / "rep" / "table_eom.txt").exists()
        assert main(
            ["plot", "--results", str(out), "--out", str(tmp_path / "plots")]
        ) == 0
        assert (tmp_path / "plots" / "tradeoff_eom.png").exists()

    def test_evaluate_verb(self, tiny_run, tmp_path, capsys):
        _, out = tiny_run
        checkpoint = out / "runs" / "small_cnn" / "baseline" / "split0" / "best.pt"
        code = main(
            [
                "evaluate",
                "--checkpoint", str(checkpoint),
                "--source", "synthetic",
                "--manifest", str(out / "data" / "external_test" / "manifest.csv"),
                "--images", str(out / "data" / "external_test" / "images"),
                "--out", str(tmp_path / "eval"),
            ]
        )
        assert code == 0
        assert (tmp_path / "eval" / "predictions.csv").exists()
        report = json.loads((tmp_path / "eval" / "report.json").read_text())
        assert report["variant"] == "baseline"
        assert "EOM" in capsys.readouterr().out
