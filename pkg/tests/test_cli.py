import json
import os

import numpy as np
import pytest

from twophase import cli
from twophase.io import load_tns, read_pgm

TINY = ["--data.train_samples", "8", "--data.eval_samples", "4",
        "--train.iterations", "3", "--train.batch_size", "4"]


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["pipeline", "--out", str(out)] + TINY)
    assert code == 0
    return out


class TestArgHandling:
    def test_no_command_is_usage_error(self):
        assert cli.main([]) == cli.USAGE_ERROR

    def test_version_exits_clean(self):
        assert cli.main(["--version"]) == 0

    def test_unknown_override_key(self, tmp_path):
        code = cli.main(["gen-data", "--out", str(tmp_path), "--bogus.key", "1"])
        assert code == cli.USAGE_ERROR

    def test_flag_without_value(self, tmp_path):
        code = cli.main(["gen-data", "--out", str(tmp_path), "--train.iterations"])
        assert code == cli.USAGE_ERROR

    def test_bad_override_value(self, tmp_path):
        code = cli.main(["gen-data", "--out", str(tmp_path),
                         "--train.iterations", "abc"])
        assert code == cli.VALIDATION_ERROR

    def test_missing_config_file(self, tmp_path):
        code = cli.main(["gen-data", "--out", str(tmp_path),
                         "--config", str(tmp_path / "nope.json")])
        assert code == cli.INPUT_ERROR

    def test_unknown_config_file_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"not.a.key": 1}))
        code = cli.main(["gen-data", "--out", str(tmp_path), "--config", str(cfg)])
        assert code == cli.VALIDATION_ERROR

    def test_precedence_flags_over_file_over_defaults(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train.iterations": 50, "tolerance": 7}))
        merged = cli.load_config(str(cfg), {"train.iterations": "9"})
        assert merged["train.iterations"] == 9     # flag wins
        assert merged["tolerance"] == 7            # file wins over default
        assert merged["train.batch_size"] == 15    # default survives

    def test_equals_form_overrides(self):
        assert cli.parse_overrides(["--seed=3", "--train.base_lr", "0.1"]) == \
            {"seed": "3", "train.base_lr": "0.1"}


class TestGenData:
    def test_writes_both_splits(self, tmp_path):
        out = tmp_path / "data"
        assert cli.main(["gen-data", "--out", str(out),
                         "--data.train_samples", "3",
                         "--data.eval_samples", "2"]) == 0
        for split, n in (("train", 3), ("eval", 2)):
            manifest = json.loads((out / split / "manifest.json").read_text())
            assert len(manifest["samples"]) == n
            first = manifest["samples"][0]["image"]
            assert (out / split / first).exists()

    def test_splits_use_distinct_seeds(self, tmp_path):
        out = tmp_path / "data"
        cli.main(["gen-data", "--out", str(out), "--data.train_samples", "2",
                  "--data.eval_samples", "2"])
        a = read_pgm(str(out / "train" / "images" / "img_00000.pgm"))
        b = read_pgm(str(out / "eval" / "images" / "img_00000.pgm"))
        assert not np.array_equal(a, b)


class TestTrainCommand:
    def test_later_phase_requires_earlier_checkpoint(self, tmp_path):
        data = tmp_path / "data"
        cli.main(["gen-data", "--out", str(data), "--data.train_samples", "4",
                  "--data.eval_samples", "2"])
        code = cli.main(["train", "--data", str(data), "--phase", "2",
                         "--out", str(tmp_path / "run")] + TINY)
        assert code == cli.INPUT_ERROR

    def test_missing_dataset(self, tmp_path):
        code = cli.main(["train", "--data", str(tmp_path / "nope"),
                         "--phase", "1", "--out", str(tmp_path / "run")])
        assert code == cli.INPUT_ERROR

    def test_phase_one_writes_checkpoint_and_history(self, tmp_path):
        data = tmp_path / "data"
        cli.main(["gen-data", "--out", str(data), "--data.train_samples", "4",
                  "--data.eval_samples", "2"])
        run = tmp_path / "run"
        assert cli.main(["train", "--data", str(data), "--phase", "1",
                         "--out", str(run)] + TINY) == 0
        assert (run / "phase1" / "model.fcn1").exists()
        history = (run / "phase1" / "loss.csv").read_text().strip().split("\n")
        assert history[0] == "iteration,lr,loss"
        assert len(history) == 4  # header + 3 iterations


class TestPipelineOutputs:
    def test_artifact_layout(self, pipeline_run):
        for rel in ("config.json", "metrics.json", "report.txt",
                    "phase1/model.fcn1", "phase2/model.fcn1",
                    "phase1/predictions.json",
                    "heatmaps/phase1/probs.json",
                    "heatmaps/phase2/heatmaps_00000.tns",
                    "fused/fused_00000.tns",
                    "data/eval/manifest.json",
                    "renders/img_000_input.pgm"):
            assert (pipeline_run / rel).exists(), rel

    def test_metrics_schema(self, pipeline_run):
        metrics = json.loads((pipeline_run / "metrics.json").read_text())
        assert set(metrics["phases"]) == {"1", "2"}
        for entry in metrics["phases"].values():
            assert 0.0 <= entry["map"] <= 1.0
        assert "inter_phase_distance_px" in metrics
        assert set(metrics["saliency"]) == {"first_phase_ap", "fused_ap"}
        assert "center_baseline" in metrics

    def test_fused_matches_manual_fuse_command(self, pipeline_run, tmp_path):
        out = tmp_path / "fused2"
        code = cli.main(["fuse",
                         "--inputs",
                         str(pipeline_run / "heatmaps" / "phase1"),
                         str(pipeline_run / "heatmaps" / "phase2"),
                         "--out", str(out)])
        assert code == 0
        a = load_tns(str(pipeline_run / "fused" / "fused_00000.tns"))
        b = load_tns(str(out / "fused_00000.tns"))
        assert np.array_equal(a, b)

    def test_infer_matches_pipeline_heatmaps(self, pipeline_run, tmp_path):
        out = tmp_path / "infer"
        code = cli.main(["infer", "--model",
                         str(pipeline_run / "phase1" / "model.fcn1"),
                         "--data", str(pipeline_run / "data"),
                         "--out", str(out)])
        assert code == 0
        a = load_tns(str(pipeline_run / "heatmaps" / "phase1" / "heatmaps_00000.tns"))
        b = load_tns(str(out / "heatmaps_00000.tns"))
        assert np.array_equal(a, b)

    def test_cues_command(self, pipeline_run, tmp_path):
        out = tmp_path / "cues"
        assert cli.main(["cues", "--input", str(pipeline_run / "fused"),
                         "--out", str(out)]) == 0
        index = json.loads((out / "cues.json").read_text())
        assert index["cue_fraction"] == pytest.approx(0.2)
        name = index["images"]["0"]["0"]
        cue = read_pgm(str(out / name))
        assert set(np.unique(cue)) <= {0, 255}

    def test_cues_missing_input(self, tmp_path):
        assert cli.main(["cues", "--input", str(tmp_path / "nope"),
                         "--out", str(tmp_path / "cues")]) == cli.INPUT_ERROR

    def test_eval_loc_command(self, pipeline_run, tmp_path):
        out = tmp_path / "loc.json"
        code = cli.main(["eval-loc", "--data", str(pipeline_run / "data"),
                         "--predictions",
                         str(pipeline_run / "phase1" / "predictions.json"),
                         "--out", str(out)])
        assert code == 0
        result = json.loads(out.read_text())
        metrics = json.loads((pipeline_run / "metrics.json").read_text())
        assert result["map"] == pytest.approx(metrics["phases"]["1"]["map"])

    def test_eval_dist_command(self, pipeline_run, tmp_path, capsys):
        out = tmp_path / "dist.json"
        code = cli.main(["eval-dist",
                         "--a", str(pipeline_run / "phase1" / "predictions.json"),
                         "--b", str(pipeline_run / "phase2" / "predictions.json"),
                         "--out", str(out)])
        assert code == 0
        result = json.loads(out.read_text())
        metrics = json.loads((pipeline_run / "metrics.json").read_text())
        assert result["mean_distance_px"] == pytest.approx(
            metrics["inter_phase_distance_px"])

    def test_eval_sal_command(self, pipeline_run, tmp_path):
        out = tmp_path / "sal.json"
        code = cli.main(["eval-sal", "--data", str(pipeline_run / "data"),
                         "--heatmaps", str(pipeline_run / "fused"),
                         "--out", str(out)])
        assert code == 0
        result = json.loads(out.read_text())
        metrics = json.loads((pipeline_run / "metrics.json").read_text())
        assert result["corpus_saliency_ap"] == pytest.approx(
            metrics["saliency"]["fused_ap"])

    def test_report_regenerates_from_artifacts(self, pipeline_run, capsys):
        assert cli.main(["report", "--run", str(pipeline_run)]) == 0
        text = (pipeline_run / "report.txt").read_text()
        assert "mAP" in text and "fused" in text


class TestDeterminism:
    def test_same_seed_same_metrics_bytes(self, pipeline_run, tmp_path):
        out = tmp_path / "rerun"
        assert cli.main(["pipeline", "--out", str(out)] + TINY) == 0
        a = (pipeline_run / "metrics.json").read_bytes()
        b = (out / "metrics.json").read_bytes()
        assert a == b

    def test_different_seed_differs(self, pipeline_run, tmp_path):
        out = tmp_path / "seeded"
        assert cli.main(["pipeline", "--out", str(out), "--seed", "5"] + TINY) == 0
        a = (pipeline_run / "metrics.json").read_bytes()
        b = (out / "metrics.json").read_bytes()
        assert a != b
