# Pydantic models package

from .experiment_config import (
    TASK_KINDS,
    AlgebraTask,
    BridgeTask,
    EmbedTask,
    EnsembleSection,
    EstimatorSection,
    ExperimentConfig,
    GridSection,
    HamiltonTask,
    InitialSection,
    LagrangianTask,
    ModelSection,
    NelsonTask,
    NoetherTask,
    OutputSection,
    SimulateTask,
    WaveSection,
)
from .run_report import RunReport, Verdict

__all__ = [
    # Config
    "TASK_KINDS",
    "ExperimentConfig",
    "ModelSection",
    "InitialSection",
    "GridSection",
    "EnsembleSection",
    "WaveSection",
    "EstimatorSection",
    "OutputSection",
    # Tasks
    "SimulateTask",
    "NelsonTask",
    "EmbedTask",
    "LagrangianTask",
    "NoetherTask",
    "BridgeTask",
    "HamiltonTask",
    "AlgebraTask",
    # Report
    "RunReport",
    "Verdict",
]
