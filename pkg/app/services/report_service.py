"""Rendering of run reports: report.json, plot-ready CSV tables and a text summary."""

import json
import logging
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from app.models.pydantic.run_report import RunReport

logger = logging.getLogger(__name__)


def jsonable(value):
    """Convert numpy scalars/arrays and complex numbers into JSON-compatible values.

    Complex numbers become ``[re, im]``.
    """
    if isinstance(value, Mapping):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (complex, np.complexfloating)):
        return [float(value.real), float(value.imag)]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def write_table(path: Union[str, Path], columns: Mapping[str, np.ndarray]) -> Path:
    """Write equal-length columns as CSV, in the given order."""
    path = Path(path)
    names = list(columns)
    data = np.column_stack([np.asarray(columns[name], dtype=float) for name in names])
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.17g")
    logger.debug(f"Wrote {path}")
    return path


def write_report(report: RunReport, directory: Union[str, Path]) -> Path:
    path = Path(directory) / "report.json"
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return path


def report_render(report: RunReport) -> str:
    """Human-readable summary of a report."""
    lines = [f"task: {report.task or '(none)'}", f"config: {report.config_hash[:16]}", f"status: {report.status}"]
    if report.error:
        lines.append(f"error: {report.error}")
    for name in sorted(report.metrics):
        value = report.metrics[name]
        if isinstance(value, (int, float, bool, str)):
            lines.append(f"  {name} = {value}")
    for verdict in report.verdicts:
        mark = "PASS" if verdict.passed else "FAIL"
        extra = "" if verdict.tolerance is None else f" (tolerance {verdict.tolerance:g})"
        value = "" if verdict.value is None else f" {verdict.value:.6g}"
        detail = f" {verdict.detail}" if verdict.detail else ""
        lines.append(f"[{mark}] {verdict.name}:{value}{extra}{detail}")
    if report.artifacts:
        lines.append("artifacts:")
        lines.extend(f"  {a}" for a in report.artifacts)
    if report.timing:
        lines.append("timing: " + ", ".join(f"{k}={v:.2f}s" for k, v in report.timing.items()))
    return "\n".join(lines)
