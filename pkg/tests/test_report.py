from pathlib import Path

import pytest
from rich.console import Console

from lidar_mos.observability import TrainingRun
from lidar_mos.report import (
    TRAINING_LOG_COLUMNS,
    EpochTracker,
    ReportFormatter,
    RunningLoss,
    config_header,
    format_value,
    read_csv_rows,
    status_line,
    write_csv,
    write_plot_data,
)
from lidar_mos.train import EpochMetrics


def metrics(epoch, loss, iou):
    return EpochMetrics(epoch=epoch, total_loss=loss, voxel_loss=loss / 2, point_loss=loss / 2, moving_iou=iou)


class TestFiles:
    def test_csv_has_config_header_and_rows(self, tmp_path):
        resolved = {"train.epochs": 3, "model.dtype": "float32", "train.shuffle": True}
        path = write_csv(tmp_path / "log.csv", TRAINING_LOG_COLUMNS, [metrics(1, 0.5, 0.25).as_row()], resolved)
        lines = path.read_text().splitlines()
        assert lines[:3] == ["# model.dtype = float32", "# train.epochs = 3", "# train.shuffle = true"]
        assert lines[3] == ",".join(TRAINING_LOG_COLUMNS)
        (row,) = read_csv_rows(path)
        assert row["epoch"] == "1"
        assert float(row["total_loss"]) == pytest.approx(0.5)

    def test_missing_column(self, tmp_path):
        with pytest.raises(KeyError):
            write_csv(tmp_path / "x.csv", ("a", "b"), [{"a": 1}])

    def test_plot_data(self, tmp_path):
        path = write_plot_data(tmp_path / "pr.dat", ("recall", "precision"), [(1.0, 0.5), (0.0, 0.0)],
                               {"loop.k": 10})
        lines = Path(path).read_text().splitlines()
        assert lines == ["# loop.k = 10", "# recall precision", "1.0 0.5", "0.0 0.0"]


class TestFormatting:
    def test_format_value(self):
        assert format_value(False) == "false"
        assert format_value(None) == "null"
        assert format_value((8, 12, 16)) == "[8, 12, 16]"
        assert format_value(0.1) == "0.1"

    def test_config_header_sorted(self):
        assert config_header({"b": 1, "a": 2}) == ["# a = 2", "# b = 1"]

    def test_status_line(self):
        assert status_line("done") == "[OK] done"
        assert status_line("oops", ok=False) == "[FAILED] oops"

    def test_tables_render(self):
        formatter = ReportFormatter()
        console = Console(record=True, width=120)
        report = formatter.mos_table(
            [{"sequence": "00", "class": "moving", "tp": 3, "fp": 1, "fn": 0, "iou": 0.75}], "75.0"
        )
        for element in report.elements:
            console.print(element)
        console.print(formatter.training_table([metrics(1, 1.0, 0.1)]).elements[0])
        console.print(formatter.config_panel({"seed": 1}))
        text = console.export_text()
        assert "Moving IoU: 75.0" in text
        assert "0.7500" in text
        assert "seed = 1" in text

    def test_long_tables_are_elided(self):
        rows = [{"epoch": i} for i in range(100)]
        console = Console(record=True, width=80)
        console.print(ReportFormatter().table("t", ["epoch"], rows).elements[0])
        assert "more" in console.export_text()


class TestTracking:
    def test_running_loss_mean(self):
        total = RunningLoss(2.0, 1.0, 1.0, 1) + RunningLoss(4.0, 3.0, 1.0, 1)
        mean = total.mean()
        assert (mean.total, mean.voxel, mean.point, mean.count) == (3.0, 2.0, 1.0, 2)
        assert RunningLoss().mean().is_empty()

    def test_epoch_tracker(self):
        tracker = EpochTracker()
        assert tracker.best() is None
        for m in (metrics(1, 3.0, 0.2), metrics(2, 2.0, 0.5), metrics(3, 2.5, 0.5)):
            tracker.record(m)
        assert tracker.best().epoch == 2
        assert tracker.strictly_decreasing(first=2)
        assert not tracker.strictly_decreasing()

    def test_disabled_training_run_is_a_no_op(self, tmp_path):
        with TrainingRun({"seed": 0}, enabled=False) as run:
            run.log_epoch(metrics(1, 1.0, 0.0))
            run.log_checkpoint(tmp_path / "missing.ckpt")

    def test_tracking_env_switch(self, monkeypatch):
        monkeypatch.setenv("LIDAR_MOS_MLFLOW", "yes")
        assert TrainingRun({}).enabled
        monkeypatch.setenv("LIDAR_MOS_MLFLOW", "0")
        assert not TrainingRun({}).enabled
