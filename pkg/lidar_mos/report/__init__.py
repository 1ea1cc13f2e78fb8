"""
Report submodule - console tables, report files and loss tracking

Provides:
- ReportFormatter: rich tables and panels for command results
- RunningLoss / EpochTracker: loss accumulation
- write_csv / write_plot_data: report files with a resolved-config header
- Constants: SUCCESS_PREFIX, FAILURE_PREFIX, DisplayLimits, report column layouts
"""

from .formatter import ReportFormatter, FormattedReport
from .tracker import RunningLoss, EpochTracker
from .writer import (
    TRAINING_LOG_COLUMNS,
    MOS_REPORT_COLUMNS,
    ODOM_REPORT_COLUMNS,
    LOOP_REPORT_COLUMNS,
    POSE_GRAPH_COLUMNS,
    write_csv,
    write_plot_data,
    read_csv_rows,
)
from .utils import (
    SUCCESS_PREFIX,
    FAILURE_PREFIX,
    DisplayLimits,
    status_line,
    format_value,
    config_header,
)

__all__ = [
    # Formatter
    "ReportFormatter",
    "FormattedReport",
    # Tracker
    "RunningLoss",
    "EpochTracker",
    # Writer
    "TRAINING_LOG_COLUMNS",
    "MOS_REPORT_COLUMNS",
    "ODOM_REPORT_COLUMNS",
    "LOOP_REPORT_COLUMNS",
    "POSE_GRAPH_COLUMNS",
    "write_csv",
    "write_plot_data",
    "read_csv_rows",
    # Utils
    "SUCCESS_PREFIX",
    "FAILURE_PREFIX",
    "DisplayLimits",
    "status_line",
    "format_value",
    "config_header",
]
