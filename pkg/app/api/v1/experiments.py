from typing import Optional

from fastapi import APIRouter, Depends, File, Form, UploadFile

from app.models.pydantic.run_report import RunReport
from app.services.experiment_service import ExperimentService, get_experiment_service

router = APIRouter(prefix="/experiments", tags=["experiments"])


@router.post(
    "/run",
    response_model=RunReport,
    summary="Run an Experiment Config",
    description="Upload a TOML experiment config, run its task and return the run report.",
)
async def run_experiment(
    config_file: UploadFile = File(..., description="TOML experiment config"),
    seed: Optional[int] = Form(None, ge=0, description="Optional seed override"),
    experiment_service: ExperimentService = Depends(get_experiment_service),
) -> RunReport:
    """
    Run one experiment.

    The run executes in a worker thread. Config errors come back as 422 with
    key-path diagnostics, numerical aborts as 500.
    """
    return await experiment_service.run_uploaded_config(config_file, seed)


@router.get(
    "/health",
    summary="Health Check",
    description="Check if the experiment service is healthy and operational.",
)
async def health_check(
    experiment_service: ExperimentService = Depends(get_experiment_service),
):
    """Simple health check endpoint for the experiment service."""
    return experiment_service.get_health_status()


@router.get(
    "/tasks",
    summary="Get Supported Tasks",
    description="List the task kinds and output formats an experiment config may use.",
)
async def get_tasks(
    experiment_service: ExperimentService = Depends(get_experiment_service),
):
    return experiment_service.get_supported_tasks()
