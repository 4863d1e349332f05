"""
Tests for report rendering and the exit-code mapping of run reports.
"""
import json

import numpy as np
import pytest

from app.core.errors import EXIT_NUMERICAL_ABORT, EXIT_OK, EXIT_VERDICT_FAILED
from app.models.pydantic.run_report import RunReport, Verdict
from app.services.report_service import jsonable, report_render, write_report, write_table


def make_report(**kwargs) -> RunReport:
    defaults = dict(task="simulate", config={"task": {"kind": "simulate"}}, config_hash="ab" * 32, seed=7)
    defaults.update(kwargs)
    return RunReport(**defaults)


class TestJsonable:
    @pytest.mark.unit
    def test_numpy_and_complex_values(self):
        value = {
            "z": 1 + 2j,
            "arr": np.array([1.5, 2.5]),
            "flag": np.bool_(True),
            "n": np.int64(3),
            "nested": (np.complex128(0.5 - 1j),),
        }
        assert jsonable(value) == {
            "z": [1.0, 2.0],
            "arr": [1.5, 2.5],
            "flag": True,
            "n": 3,
            "nested": [[0.5, -1.0]],
        }
        json.dumps(jsonable(value))


class TestWriters:
    @pytest.mark.unit
    def test_write_table(self, tmp_path):
        path = write_table(tmp_path / "moments.csv", {"t": np.array([0.0, 0.5]), "mean_1": np.array([1.0, 2.0])})
        lines = path.read_text().splitlines()
        assert lines[0] == "t,mean_1"
        assert lines[2] == "0.5,2"

    @pytest.mark.unit
    def test_write_report(self, tmp_path):
        report = make_report(verdicts=[Verdict(name="mean", passed=True, value=0.01, tolerance=0.05)])
        data = json.loads(write_report(report, tmp_path).read_text())
        assert data["task"] == "simulate"
        assert data["verdicts"][0]["passed"] is True
        assert data["status"] == "completed"


class TestRender:
    @pytest.mark.unit
    def test_verdict_lines(self):
        report = make_report(
            metrics={"forward_slope": -0.998, "series": [1, 2]},
            verdicts=[
                Verdict(name="forward_slope", passed=True, value=-0.998, tolerance=0.05),
                Verdict(name="variance", passed=False, detail="outside 5 se"),
            ],
            artifacts=["runs/report.json"],
            timing={"simulate": 1.25},
        )
        text = report_render(report)
        assert "task: simulate" in text
        assert "  forward_slope = -0.998" in text
        assert "series" not in text
        assert "[PASS] forward_slope: -0.998 (tolerance 0.05)" in text
        assert "[FAIL] variance: outside 5 se" in text
        assert "timing: simulate=1.25s" in text

    @pytest.mark.unit
    def test_empty_report(self):
        text = report_render(make_report(task=None))
        assert text.splitlines()[0] == "task: (none)"


class TestExitCodes:
    @pytest.mark.unit
    def test_ok(self):
        assert make_report(verdicts=[Verdict(name="a", passed=True)]).exit_code == EXIT_OK
        assert make_report().exit_code == EXIT_OK

    @pytest.mark.unit
    def test_failed_verdict(self):
        report = make_report(verdicts=[Verdict(name="a", passed=True), Verdict(name="b", passed=False)])
        assert not report.passed
        assert report.exit_code == EXIT_VERDICT_FAILED

    @pytest.mark.unit
    def test_aborted(self):
        report = make_report(status="aborted", error="path 0 left the finite reals at step 3")
        assert report.exit_code == EXIT_NUMERICAL_ABORT
        assert "error: path 0" in report_render(report)
