"""
Report utility functions and constants

Status prefixes, value formatting and the resolved-config
header that is echoed at the top of every report file.
"""

from typing import Any, Mapping


# === Status prefix constants ===
SUCCESS_PREFIX = "[OK]"
FAILURE_PREFIX = "[FAILED]"
HEADER_PREFIX = "# "


class DisplayLimits:
    """Console table limits"""
    MAX_ROWS = 40           # Rows shown before a table is elided
    FLOAT_DIGITS = 6        # Digits for losses and distances in CSV output


def status_line(message: str, ok: bool = True) -> str:
    return f"{SUCCESS_PREFIX if ok else FAILURE_PREFIX} {message}"


def format_value(value: Any) -> str:
    """Compact, round-trippable rendering for CSV cells and config headers"""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if value is None:
        return "null"
    return str(value)


def config_header(resolved: Mapping[str, Any]) -> list[str]:
    """'# key = value' lines in key order"""
    return [f"{HEADER_PREFIX}{key} = {format_value(resolved[key])}" for key in sorted(resolved)]
