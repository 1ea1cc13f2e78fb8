"""End-to-end runs of every command on one small synthetic sequence"""

import shutil

import numpy as np
import pytest

from lidar_mos.cli import build_parser, run
from lidar_mos.kitti_io import MotionLabel, SequenceLayout, load_sequence, read_predictions, write_predictions
from lidar_mos.report import read_csv_rows

SMALL_SENSOR = ["--set", "synth.rings=8", "--set", "synth.azimuth_bins=90", "--set", "synth.max_range=30.0",
                "--set", "synth.frames=6"]
TINY_MODEL = [
    "--set", "grid.h=8", "--set", "grid.w=8", "--set", "grid.l=8",
    "--set", "model.point_feature_dim=3", "--set", "model.mlp_hidden_sizes=[4]",
    "--set", "model.stem_channels=2", "--set", "model.stage_channels=[2, 3, 3]",
    "--set", "model.refine_hidden=4", "--set", "model.residual_frames=1",
    "--set", "train.epochs=1",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    seq = root / "seq"
    assert run(["synth-gen", str(seq), "--seed", "3", "--out", str(root / "out"), *SMALL_SENSOR]) == 0
    return root, seq


@pytest.fixture(scope="module")
def checkpoint(workspace):
    root, seq = workspace
    with pytest.MonkeyPatch.context() as mp:
        mp.delenv("LIDAR_MOS_MLFLOW", raising=False)
        assert run(["train", str(seq), "--out", str(root / "train"), *TINY_MODEL]) == 0
    return root / "train" / "model.ckpt"


def test_synth_gen_writes_kitti_layout(workspace):
    _, seq = workspace
    layout = SequenceLayout(seq)
    assert layout.frame_count() == 6
    assert layout.pose_file.exists() and layout.times_file.exists()
    data = load_sequence(layout)
    assert any(np.any(m == MotionLabel.MOVING) for m in data.motion)


def test_baseline_diff(workspace):
    root, seq = workspace
    out_dir = root / "baseline"
    assert run(["baseline-diff", str(seq), "--out-dir", str(out_dir), "--set", "model.residual_frames=2"]) == 0
    assert len(list(out_dir.glob("*.label"))) == 6


def test_train_writes_log_and_checkpoint(workspace, checkpoint):
    root, _ = workspace
    assert checkpoint.exists()
    (row,) = read_csv_rows(root / "train" / "training_log.csv")
    assert row["epoch"] == "1"
    assert np.isfinite(float(row["total_loss"]))
    assert "# grid.h = 8" in (root / "train" / "training_log.csv").read_text()


def test_segment_is_deterministic(workspace, checkpoint):
    root, seq = workspace
    first, second = root / "seg1", root / "seg2"
    for out_dir in (first, second):
        assert run(["segment", str(seq), "--checkpoint", str(checkpoint), "--out-dir", str(out_dir)]) == 0
    for path in sorted(first.glob("*.label")):
        np.testing.assert_array_equal(read_predictions(path), read_predictions(second / path.name))
    assert len(list(first.glob("*.label"))) == 6


def test_eval_mos_of_ground_truth_is_perfect(workspace):
    root, seq = workspace
    pred_dir = root / "truth_pred"
    for k, motion in enumerate(load_sequence(SequenceLayout(seq)).motion):
        write_predictions(pred_dir / f"{k:06d}.label", motion)
    out = root / "eval"
    assert run(["eval-mos", str(seq), "--pred", str(pred_dir), "--out", str(out)]) == 0
    rows = {(r["sequence"], r["class"]): r for r in read_csv_rows(out / "mos_report.csv")}
    moving = rows[("all", "moving")]
    assert float(moving["iou"]) == pytest.approx(1.0)
    assert moving["fp"] == "0" and moving["fn"] == "0"
    assert ("seq", "static") in rows


def test_eval_odom_reports_both_runs(workspace):
    root, seq = workspace
    out = root / "odom"
    assert run(["eval-odom", str(seq), "--out", str(out), "--set", "odom.iterations=5"]) == 0
    runs = [r["run"] for r in read_csv_rows(out / "odom_report.csv")]
    assert runs == ["unfiltered", "filtered"]
    assert (out / "odometry_filtered.txt").exists()


def test_loopclose_writes_reports(workspace):
    root, seq = workspace
    out = root / "loops"
    assert run(["loopclose", str(seq), "--out", str(out), "--set", "loop.keyframe_every=1"]) == 0
    assert (out / "loop_report.csv").exists()
    assert (out / "pose_graph.csv").exists()


def test_clean_map_with_labels_leaves_no_moving_points(workspace, capsys):
    root, seq = workspace
    out = root / "map"
    assert run(["clean-map", str(seq), "--out", str(out)]) == 0
    exported = read_predictions(out / "seq_map.label")
    assert not np.any(exported == MotionLabel.MOVING)
    assert "moving left" in capsys.readouterr().out


def test_segment_default_output_feeds_eval_mos(workspace, checkpoint, tmp_path):
    root, seq = workspace
    copy = tmp_path / "seq"
    shutil.copytree(seq, copy)
    assert run(["segment", str(copy), "--checkpoint", str(checkpoint)]) == 0
    assert len(list(SequenceLayout(copy).prediction_dir.glob("*.label"))) == 6
    out = tmp_path / "eval"
    assert run(["eval-mos", str(copy), "--out", str(out)]) == 0
    assert (out / "mos_report.csv").exists()


def test_verbose_prints_resolved_config(tmp_path, capsys):
    assert run(["synth-gen", str(tmp_path / "s"), "-v", "--seed", "5", *SMALL_SENSOR]) == 0
    captured = capsys.readouterr()
    assert "Resolved config" in captured.err
    assert "synth.frames = 6" in captured.err
    assert "[OK] street (seed 5)" in captured.out


class TestFailures:
    def test_missing_sequence(self, tmp_path, capsys):
        assert run(["eval-mos", str(tmp_path / "absent")]) == 3
        line = capsys.readouterr().err.strip().splitlines()[-1]
        assert line.startswith("[FAILED] kind=MosIOError exit=3 message=")

    def test_bad_config(self, tmp_path, capsys):
        assert run(["synth-gen", str(tmp_path / "s"), "--set", "grid.w=12"]) == 2
        assert "kind=ConfigError" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, workspace, tmp_path, capsys):
        _, seq = workspace
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        assert run(["segment", str(seq), "--checkpoint", str(bad), "--out-dir", str(tmp_path / "p")]) == 4
        assert "kind=MalformedFile" in capsys.readouterr().err

    def test_unknown_scenario(self, tmp_path):
        assert run(["synth-gen", str(tmp_path / "s"), "--set", "synth.scenario=\"motorway\""]) == 2


def test_help_lists_config_keys_and_exit_codes(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    text = capsys.readouterr().out
    assert "train.learning_rate" in text
    assert "ConfigError" in text
    assert "12 NotOrthonormal" in text
