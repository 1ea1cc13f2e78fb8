"""
Observability module for lidar_mos.

Provides optional MLflow tracking of training runs.
"""

from .mlflow_setup import TrainingRun, setup_mlflow_tracking, tracking_enabled

__all__ = ["TrainingRun", "setup_mlflow_tracking", "tracking_enabled"]
