"""
ReportFormatter - console rendering of run results

Turns metric objects into rich renderables. The CLI prints them; nothing here
writes to the console directly.
"""

from dataclasses import dataclass, field
from typing import Any, Iterable, List, Mapping

from rich.panel import Panel
from rich.table import Table
from rich.text import Text

from .utils import DisplayLimits, format_value, status_line


@dataclass
class FormattedReport:
    """Renderable elements for one command's result"""
    title: str
    elements: List[Any] = field(default_factory=list)
    success: bool = True


class ReportFormatter:
    """Metric table formatter

    Usage example:
        formatter = ReportFormatter()
        report = formatter.mos_table(rows, moving_iou_text="74.9")
        for elem in report.elements:
            console.print(elem)
    """

    def _table(self, title: str, columns: Iterable[str]) -> Table:
        table = Table(title=title, show_lines=False, header_style="bold cyan")
        for col in columns:
            table.add_column(col, justify="right" if col not in ("sequence", "class", "run") else "left")
        return table

    def _add_rows(self, table: Table, columns: list[str], rows: list[Mapping[str, Any]]):
        shown = rows[:DisplayLimits.MAX_ROWS]
        for row in shown:
            table.add_row(*(self._cell(row[c]) for c in columns))
        if len(rows) > len(shown):
            table.add_row(*([f"... {len(rows) - len(shown)} more"] + [""] * (len(columns) - 1)))

    @staticmethod
    def _cell(value: Any) -> str:
        if isinstance(value, float):
            return f"{value:.4f}"
        return format_value(value)

    def table(self, title: str, columns: list[str], rows: list[Mapping[str, Any]]) -> FormattedReport:
        table = self._table(title, columns)
        self._add_rows(table, columns, rows)
        return FormattedReport(title=title, elements=[table])

    def mos_table(self, rows: list[Mapping[str, Any]], moving_iou_text: str) -> FormattedReport:
        columns = ["sequence", "class", "tp", "fp", "fn", "iou"]
        report = self.table("Moving object segmentation", columns, rows)
        report.elements.append(Text(f"Moving IoU: {moving_iou_text}", style="bold green"))
        return report

    def training_table(self, history: list[Any]) -> FormattedReport:
        columns = ["epoch", "total_loss", "voxel_loss", "point_loss", "moving_iou"]
        return self.table("Training", columns, [m.as_row() for m in history])

    def config_panel(self, resolved: Mapping[str, Any], keys: Iterable[str] | None = None) -> Panel:
        keys = sorted(keys if keys is not None else resolved)
        body = "\n".join(f"{k} = {format_value(resolved[k])}" for k in keys if k in resolved)
        return Panel(body or "(defaults)", title="Resolved config", border_style="dim")

    def status(self, message: str, ok: bool = True) -> Text:
        return Text(status_line(message, ok), style="green" if ok else "red")
