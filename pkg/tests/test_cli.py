import json
from pathlib import Path

import numpy as np
import pytest

from ppgage.cli import main, run_analyze, run_generate, run_report
from ppgage.config import config_from_dict, config_hash, load_config, save_config
from ppgage.errors import InvalidInputError

TINY_CONFIG = {
    "seed": 7,
    "cohort": {
        "n_subjects": 60,
        "serial_fraction": 0.2,
        "offset_sigma": 5.0,
        "baseline_hazard": 0.05,
        "log_hr_per_offset_year": 0.08,
    },
    "net": {
        "input_length": 100,
        "stem_channels": 4,
        "stages": [[1, 4, 2]],
        "se_reduction": 2,
        "kernel_size": 5,
    },
    "train": {
        "epochs": 2,
        "batch_size": 64,
        "loss": "dist",
        "label_min": 30,
        "label_max": 95,
    },
    "analysis": {"threshold_mode": "sd", "n_knots": 3, "gap_grid": [-5.0, 5.0, 5]},
}


def write_config(tmp_path, overrides=None) -> Path:
    data = json.loads(json.dumps(TINY_CONFIG))
    data["out_dir"] = str(tmp_path / "run")
    for key, value in (overrides or {}).items():
        section, _, field = key.partition(".")
        if field:
            data.setdefault(section, {})[field] = value
        else:
            data[section] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def run_stage(args) -> int:
    return main([str(a) for a in args])


class TestConfig:
    def test_round_trip_and_hash_stability(self, tmp_path):
        config = config_from_dict(json.loads(json.dumps(TINY_CONFIG)))
        path = tmp_path / "cfg.json"
        save_config(path, config)
        loaded = load_config(path)
        assert loaded == config
        assert config_hash(loaded) == config_hash(config)

    def test_unknown_keys_rejected(self):
        with pytest.raises(InvalidInputError):
            config_from_dict({"nope": {}})
        with pytest.raises(InvalidInputError):
            config_from_dict({"train": {"bogus_field": 1}})


class TestGenerate:
    def test_fixed_seed_gives_identical_bytes(self, tmp_path):
        cfg = write_config(tmp_path)
        assert run_stage(["generate", "--config", cfg]) == 0
        dataset = tmp_path / "run" / "dataset.jsonl"
        first = dataset.read_bytes()
        assert run_stage(["generate", "--config", cfg]) == 0
        assert dataset.read_bytes() == first

    def test_record_and_serial_counts(self, tmp_path):
        cfg = write_config(tmp_path)
        run_stage(["generate", "--config", cfg])
        lines = (tmp_path / "run" / "dataset.jsonl").read_text().strip().splitlines()
        records = [json.loads(line) for line in lines]
        n_serial = sum(1 for r in records if r["visit"] == 1)
        assert len({r["id"] for r in records}) == 60
        assert n_serial == 12  # serial_fraction 0.2 of 60, exact
        assert len(records) == 60 + 12

    def test_manifest_lists_existing_artifacts(self, tmp_path):
        cfg = write_config(tmp_path)
        run_stage(["generate", "--config", cfg])
        manifest = json.loads((tmp_path / "run" / "manifest_generate.json").read_text())
        assert Path(manifest["artifacts"]["dataset"]).exists()
        assert manifest["stage"] == "generate"


class TestTrainStage:
    def test_one_epoch_one_metrics_row(self, tmp_path):
        cfg = write_config(tmp_path, {"train.epochs": 1})
        run_stage(["generate", "--config", cfg])
        assert run_stage(["train", "--config", cfg]) == 0
        rows = (tmp_path / "run" / "metrics_train.csv").read_text().strip().splitlines()
        assert len(rows) == 2  # header + 1 epoch

    def test_loss_kinds_produce_different_checkpoints(self, tmp_path):
        cfg = write_config(tmp_path)
        run_stage(["generate", "--config", cfg])
        run_stage(["train", "--config", cfg, "--loss", "dist"])
        dist_bytes = (tmp_path / "run" / "checkpoint.ppgage").read_bytes()
        run_stage(["train", "--config", cfg, "--loss", "mae"])
        mae_bytes = (tmp_path / "run" / "checkpoint.ppgage").read_bytes()
        assert dist_bytes != mae_bytes

    def test_resume_extends_previous_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path, {"train.epochs": 1})
        run_stage(["generate", "--config", cfg])
        run_stage(["train", "--config", cfg])
        cfg2 = write_config(tmp_path, {"train.epochs": 2})
        run_stage(["train", "--config", cfg2, "--resume"])
        rows = (tmp_path / "run" / "metrics_train.csv").read_text().strip().splitlines()
        assert len(rows) == 3

    def test_missing_dataset_fails_with_exit_code(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        code = run_stage(["train", "--config", cfg])
        assert code == 3
        err = capsys.readouterr().err
        assert "PPGAGE_ERROR code=MISSING_ARTIFACT" in err


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(tmp_path)
    assert run_stage(["all", "--config", cfg]) == 0
    return tmp_path / "run", cfg


class TestPipelineArtifacts:
    def test_all_stage_artifacts_exist(self, full_run):
        out, _ = full_run
        for name in [
            "dataset.jsonl",
            "checkpoint.ppgage",
            "metrics_train.csv",
            "predictions.csv",
            "metrics_eval.csv",
            "decile_mae.csv",
            "hr_table.csv",
            "logrank.csv",
            "spline_hr.csv",
            "serial_hr.csv",
            "threshold.csv",
            "report.txt",
        ]:
            assert (out / name).exists(), name

    def test_reference_rows_are_exactly_one(self, full_run):
        out, _ = full_run
        lines = (out / "hr_table.csv").read_text().strip().splitlines()
        reference = [l for l in lines if "correct_reference" in l]
        assert reference and reference[0].split(",")[2] == "1"
        serial_lines = (out / "serial_hr.csv").read_text().strip().splitlines()
        g4 = [l for l in serial_lines if l.startswith("G4_reference")]
        assert g4 and g4[0].split(",")[2] == "1"

    def test_spline_curve_reference_gap_zero(self, full_run):
        out, _ = full_run
        rows = (out / "spline_hr.csv").read_text().strip().splitlines()[1:]
        by_gap = {float(r.split(",")[0]): float(r.split(",")[1]) for r in rows}
        assert by_gap[0.0] == 1.0

    def test_report_regeneration_is_byte_identical(self, full_run):
        out, cfg = full_run
        report = out / "report.txt"
        first = report.read_bytes()
        assert run_stage(["report", "--config", cfg]) == 0
        assert report.read_bytes() == first

    def test_report_names_missing_artifacts(self, full_run):
        out, cfg = full_run
        moved = out / "metrics_eval.csv.bak"
        (out / "metrics_eval.csv").rename(moved)
        try:
            run_stage(["report", "--config", cfg])
            text = (out / "report.txt").read_text()
            assert "metrics_eval: MISSING" in text
        finally:
            moved.rename(out / "metrics_eval.csv")
            run_stage(["report", "--config", cfg])

    def test_prediction_gaps_are_consistent(self, full_run):
        out, _ = full_run
        rows = (out / "predictions.csv").read_text().strip().splitlines()[1:]
        for row in rows:
            parts = row.split(",")
            assert abs(float(parts[5]) - (float(parts[4]) - float(parts[3]))) < 1e-6


class TestFailureModes:
    def test_bad_config_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run_stage(["generate", "--config", bad]) == 2
        assert "PPGAGE_ERROR code=INVALID_INPUT" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert run_stage(["generate", "--config", tmp_path / "nope.json"]) == 2
        assert "PPGAGE_ERROR" in capsys.readouterr().err

    def test_invalid_flag_value_rejected_by_argparse(self, tmp_path):
        with pytest.raises(SystemExit):
            run_stage(["train", "--loss", "huber"])
