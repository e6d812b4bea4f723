import csv
import json

import pytest
from click.testing import CliRunner

from main import cli
from models.config import RunConfig, Stage
from models.report import EvalReport
from services.pipeline import save_checkpoint


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_file(tmp_path, tiny_model_config, tiny_schedule_config, tiny_train_config):
    config = RunConfig(
        train=tiny_train_config.model_copy(update={"steps": 1, "checkpoint_every": 1}),
        model=tiny_model_config,
        schedule=tiny_schedule_config,
        device="cpu",
    )
    path = tmp_path / "config.json"
    path.write_text(config.model_dump_json())
    return path


@pytest.fixture
def checkpoint(tmp_path, tiny_bundle):
    path = tmp_path / "ckpt" / "step_1.pt"
    save_checkpoint(path, tiny_bundle, Stage.ONESTEP_FINETUNE, 1)
    return path


def test_gen_data_is_reproducible(runner, tmp_path):
    args = ["gen-data", "--scenes", "1", "--views", "2", "--res", "32", "--seed", "3"]
    first = runner.invoke(cli, args + ["--out", str(tmp_path / "a")])
    second = runner.invoke(cli, args + ["--out", str(tmp_path / "b")])
    assert first.exit_code == 0, first.output
    assert first.stdout.split("sha256=")[1] == second.stdout.split("sha256=")[1]
    assert len(list((tmp_path / "a").glob("scene_0000/view_*"))) == 2


def test_gen_data_requires_out(runner):
    assert runner.invoke(cli, ["gen-data"]).exit_code == 2


def test_gen_data_bad_resolution(runner, tmp_path):
    result = runner.invoke(cli, ["gen-data", "--res", "48", "--out", str(tmp_path / "d")])
    assert result.exit_code == 2


def test_onestep_without_prerequisite_is_stage_order_error(runner, tmp_path, dataset_dir, config_file):
    result = runner.invoke(cli, [
        "train", "--stage", "onestep", "--config", str(config_file),
        "--data", str(dataset_dir), "--run-dir", str(tmp_path / "run"),
    ])
    assert result.exit_code == 3


def test_full_stage_sequence(runner, tmp_path, dataset_dir, config_file):
    run_dir = tmp_path / "run"
    for stage in ("autoencoder", "multistep", "onestep", "din"):
        result = runner.invoke(cli, [
            "train", "--stage", stage, "--config", str(config_file),
            "--data", str(dataset_dir), "--run-dir", str(run_dir),
        ])
        assert result.exit_code == 0, result.output
    assert (run_dir / "config.json").is_file()
    assert (run_dir / "checkpoints" / "din_train" / "step_1.pt").is_file()
    with open(run_dir / "metrics.csv", newline="") as fh:
        stages = [row["stage"] for row in csv.DictReader(fh)]
    assert stages == ["autoencoder_pretrain", "multistep_pretrain", "onestep_finetune", "din_train"]
    assert not (run_dir / ".lock").exists()


def test_locked_run_dir_keeps_running_config(runner, tmp_path, dataset_dir, config_file):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    (run_dir / "config.json").write_text("running job\n")
    (run_dir / ".lock").write_text("1234")
    result = runner.invoke(cli, [
        "train", "--stage", "autoencoder", "--config", str(config_file),
        "--data", str(dataset_dir), "--run-dir", str(run_dir),
    ])
    assert result.exit_code == 1
    assert "locked" in result.stderr
    assert (run_dir / "config.json").read_text() == "running job\n"
    assert not (run_dir / "metrics.csv").exists()
    assert (run_dir / ".lock").read_text() == "1234"


def test_resume_with_other_architecture_is_integrity_error(runner, tmp_path, dataset_dir, config_file, checkpoint):
    other = json.loads(config_file.read_text())
    other["model"]["din_width"] = 16
    other_path = tmp_path / "other.json"
    other_path.write_text(json.dumps(other))
    result = runner.invoke(cli, [
        "train", "--stage", "onestep", "--config", str(other_path), "--data", str(dataset_dir),
        "--run-dir", str(tmp_path / "run"), "--resume", str(checkpoint),
    ])
    assert result.exit_code == 4


def test_resolution_mismatch_is_usage_error(runner, tmp_path, dataset_dir, config_file):
    config = json.loads(config_file.read_text())
    config["train"]["resolution"] = 64
    config_file.write_text(json.dumps(config))
    result = runner.invoke(cli, [
        "train", "--stage", "autoencoder", "--config", str(config_file),
        "--data", str(dataset_dir), "--run-dir", str(tmp_path / "run"),
    ])
    assert result.exit_code == 2


def test_infer_is_byte_identical_and_evaluates(runner, tmp_path, dataset_dir, checkpoint):
    outs = []
    for name in ("p1", "p2"):
        out = tmp_path / name
        result = runner.invoke(cli, [
            "infer", "--ckpt", str(checkpoint), "--input", str(dataset_dir), "--out", str(out), "--deterministic",
        ])
        assert result.exit_code == 0, result.output
        outs.append(out)
    pngs = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.png"))
    assert len(pngs) == 3 * 2 * 3
    for rel in pngs:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()

    report_dir = tmp_path / "report"
    result = runner.invoke(cli, ["eval", "--pred", str(outs[0]), "--gt", str(dataset_dir), "--out", str(report_dir)])
    assert result.exit_code == 0, result.output
    report = EvalReport.model_validate_json((report_dir / "eval_report.json").read_text())
    assert report.meta.checkpoint == str(checkpoint)
    assert report.per_map is not None
    assert (report_dir / "metrics.csv").is_file()


def test_eval_with_missing_predictions(runner, tmp_path, dataset_dir):
    result = runner.invoke(cli, ["eval", "--pred", str(tmp_path / "none"), "--gt", str(dataset_dir),
                                 "--out", str(tmp_path / "r")])
    assert result.exit_code == 1
    assert "error:" in result.stderr


def test_infer_missing_checkpoint(runner, tmp_path, dataset_dir):
    result = runner.invoke(cli, ["infer", "--ckpt", str(tmp_path / "x.pt"), "--input", str(dataset_dir),
                                 "--out", str(tmp_path / "o")])
    assert result.exit_code == 1


def test_variance_command(runner, tmp_path, dataset_dir, checkpoint):
    out = tmp_path / "var"
    result = runner.invoke(cli, ["variance", "--ckpt", str(checkpoint), "--input", str(dataset_dir),
                                 "--seeds", "2", "--out", str(out)])
    assert result.exit_code == 0, result.output
    report = EvalReport.model_validate_json((out / "eval_report.json").read_text())
    assert report.variance.per_pixel_std_mean >= 0
    assert (out / "std_maps" / "scene_0000" / "std_00.sivr").is_file()


def test_variance_needs_two_seeds(runner, tmp_path, dataset_dir, checkpoint):
    result = runner.invoke(cli, ["variance", "--ckpt", str(checkpoint), "--input", str(dataset_dir),
                                 "--seeds", "1", "--out", str(tmp_path / "v")])
    assert result.exit_code == 2


def test_timing_command(runner, tmp_path, dataset_dir, checkpoint):
    out = tmp_path / "timing"
    result = runner.invoke(cli, ["timing", "--ckpt", str(checkpoint), "--input", str(dataset_dir),
                                 "--mode", "onestep", "--out", str(out)])
    assert result.exit_code == 0, result.output
    report = EvalReport.model_validate_json((out / "eval_report.json").read_text())
    assert [r.setting for r in report.timing] == ["single_view", "multi_view"]
    assert all(r.denoiser_calls == 1 for r in report.timing)


def test_ablate_reports_absent_rows(runner, tmp_path, dataset_dir, checkpoint):
    out = tmp_path / "ablation" / "table.csv"
    result = runner.invoke(cli, ["ablate", "--dataset", str(dataset_dir), "--ckpt-c", str(checkpoint),
                                 "--out", str(out)])
    assert result.exit_code == 0, result.output
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["status"] for r in rows] == ["absent", "absent", "ok", "absent"]


def test_ablate_unwritable_out_is_io_error(runner, tmp_path, dataset_dir):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    result = runner.invoke(cli, ["ablate", "--dataset", str(dataset_dir), "--out", str(blocker / "table.csv")])
    assert result.exit_code == 1
    assert "error:" in result.stderr


def test_corrupt_manifest_exits_one(runner, tmp_path):
    (tmp_path / "manifest.json").write_text("{broken")
    result = runner.invoke(cli, ["ablate", "--dataset", str(tmp_path), "--out", str(tmp_path / "t.csv")])
    assert result.exit_code == 1
    assert "error:" in result.stderr
