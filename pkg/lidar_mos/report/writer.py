"""
Report files

Every CSV and plot-data file starts with the resolved run configuration as a
block of '# key = value' comment lines, followed by the table.
"""

import csv
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ..errors import MosIOError
from .utils import DisplayLimits, HEADER_PREFIX, config_header, format_value

logger = logging.getLogger(__name__)

# Column layouts of the report files
TRAINING_LOG_COLUMNS = ("epoch", "total_loss", "voxel_loss", "point_loss", "moving_iou")
MOS_REPORT_COLUMNS = ("sequence", "class", "tp", "fp", "fn", "iou")
ODOM_REPORT_COLUMNS = ("run", "ate", "de", "dr_percent", "dr_definition")
LOOP_REPORT_COLUMNS = ("query_frame", "match_frame", "shift", "similarity", "accepted")
POSE_GRAPH_COLUMNS = ("i", "j", "relative_yaw")


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.{DisplayLimits.FLOAT_DIGITS}f}"
    return format_value(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]],
              resolved: Mapping[str, Any] | None = None) -> Path:
    """Write rows under a config header; missing columns raise KeyError"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            for line in config_header(resolved or {}):
                f.write(line + "\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            count = 0
            for row in rows:
                writer.writerow([_cell(row[c]) for c in columns])
                count += 1
    except OSError as e:
        raise MosIOError(f"cannot write {path}: {e}") from e
    logger.debug("wrote %s (%d rows)", path, count)
    return path


def write_plot_data(path: Path, columns: tuple[str, str], points: Iterable[tuple[float, float]],
                    resolved: Mapping[str, Any] | None = None) -> Path:
    """Two whitespace-separated columns, named in a comment line"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            for line in config_header(resolved or {}):
                f.write(line + "\n")
            f.write(f"{HEADER_PREFIX}{columns[0]} {columns[1]}\n")
            for x, y in points:
                f.write(f"{x!r} {y!r}\n")
    except OSError as e:
        raise MosIOError(f"cannot write {path}: {e}") from e
    return path


def read_csv_rows(path: Path) -> list[dict[str, str]]:
    """Rows of a report file, skipping the config header"""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise MosIOError(f"cannot read {path}: {e}") from e
    body = [line for line in lines if not line.startswith(HEADER_PREFIX.strip())]
    return list(csv.DictReader(body))
