"""Evaluation report containers and deterministic CSV/JSON emission.

All floating-point output is rendered with 6 significant digits and rows
keep their build order, so re-emitting the same report is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1

__all__ = ["EvalRow", "EvalReport", "emit_report", "format_value"]


@dataclass
class EvalRow:
    """One named row of metrics; insertion order of ``values`` is the column order."""

    name: str
    values: dict[str, float | int]


@dataclass
class EvalReport:
    """A titled set of rows plus the effective configuration that produced them."""

    title: str
    rows: list[EvalRow]
    config_echo: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION


def format_value(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format(v, ".6g")
    return str(v)


def _round_floats(obj):
    if isinstance(obj, float):
        return float(format(obj, ".6g"))
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def emit_report(report: EvalReport, path: str | Path, fmt: str = "csv") -> Path:
    """Write the report as CSV or JSON; returns the path written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        columns: list[str] = []
        for row in report.rows:
            for key in row.values:
                if key not in columns:
                    columns.append(key)
        lines = [",".join(["name"] + columns)]
        for row in report.rows:
            cells = [row.name] + [
                format_value(row.values[c]) if c in row.values else "" for c in columns
            ]
            lines.append(",".join(cells))
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "json":
        payload = {
            "schema_version": report.schema_version,
            "title": report.title,
            "config": _round_floats(report.config_echo),
            "rows": [
                {"name": row.name, "values": _round_floats(row.values)} for row in report.rows
            ],
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    else:
        raise ValueError(f"unknown report format: {fmt!r}")
    return path
