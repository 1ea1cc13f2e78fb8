"""Minimal MLflow tracking for training runs."""

import logging
import os
from pathlib import Path
from typing import Any, Mapping

import mlflow

EXPERIMENT_NAME = "lidar-mos"
_TRUTHY = ("1", "true", "yes", "on")


def tracking_enabled() -> bool:
    return os.getenv("LIDAR_MOS_MLFLOW", "").strip().lower() in _TRUTHY


def setup_mlflow_tracking() -> None:
    # Suppress noisy MLflow / alembic / OTel logs
    for name in ("alembic", "mlflow", "opentelemetry"):
        logging.getLogger(name).setLevel(logging.ERROR)

    tracking_uri = os.getenv("MLFLOW_TRACKING_URI")
    if tracking_uri:
        mlflow.set_tracking_uri(tracking_uri)

    mlflow.set_experiment(EXPERIMENT_NAME)


class TrainingRun:
    """Context manager logging params, per-epoch metrics and the checkpoint

    A no-op when tracking is disabled.
    """

    def __init__(self, resolved: Mapping[str, Any], enabled: bool | None = None):
        self.resolved = dict(resolved)
        self.enabled = tracking_enabled() if enabled is None else enabled
        self._run = None

    def __enter__(self) -> "TrainingRun":
        if self.enabled:
            setup_mlflow_tracking()
            self._run = mlflow.start_run()
            mlflow.log_params({k: str(v) for k, v in self.resolved.items()})
        return self

    def log_epoch(self, metrics) -> None:
        if self._run is None:
            return
        mlflow.log_metrics(
            {
                "total_loss": metrics.total_loss,
                "voxel_loss": metrics.voxel_loss,
                "point_loss": metrics.point_loss,
                "moving_iou": metrics.moving_iou,
            },
            step=metrics.epoch,
        )

    def log_checkpoint(self, path: Path) -> None:
        if self._run is not None:
            mlflow.log_artifact(str(path))

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._run is not None:
            mlflow.end_run(status="FAILED" if exc_type else "FINISHED")
            self._run = None
