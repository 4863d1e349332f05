from typing import Any, Optional

from pydantic import BaseModel, Field

from app.core.errors import EXIT_NUMERICAL_ABORT, EXIT_OK, EXIT_VERDICT_FAILED


class Verdict(BaseModel):
    """A pass/fail check with the statistic it was decided on."""

    name: str = Field(..., description="Short identifier of the check")
    passed: bool
    value: Optional[float] = Field(None, description="The statistic that was compared")
    tolerance: Optional[float] = Field(None, description="Threshold the statistic was compared with")
    detail: str = ""


class RunReport(BaseModel):
    """Outcome of one experiment run."""

    task: Optional[str] = Field(None, description="Task kind, or None for an empty task list")
    config: dict[str, Any] = Field(..., description="Echo of the validated config")
    config_hash: str = Field(..., description="SHA-256 of the canonical JSON of the config")
    seed: Optional[int] = None
    metrics: dict[str, Any] = Field(default_factory=dict)
    verdicts: list[Verdict] = Field(default_factory=list)
    timing: dict[str, float] = Field(default_factory=dict)
    artifacts: list[str] = Field(default_factory=list)
    status: str = Field("completed", description="completed or aborted")
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    @property
    def exit_code(self) -> int:
        if self.status == "aborted":
            return EXIT_NUMERICAL_ABORT
        return EXIT_OK if self.passed else EXIT_VERDICT_FAILED

    class Config:
        json_schema_extra = {
            "example": {
                "task": "nelson",
                "config": {"task": {"kind": "nelson"}},
                "config_hash": "3f1c...",
                "seed": 42,
                "metrics": {"forward_slope": -0.998},
                "verdicts": [
                    {"name": "forward_slope", "passed": True, "value": -0.998, "tolerance": 0.05}
                ],
                "timing": {"simulate": 3.2, "task": 41.7},
                "artifacts": ["runs/ou/report.json"],
                "status": "completed",
                "error": None,
            }
        }
