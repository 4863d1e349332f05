import hashlib
import json
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

ScalarOrVector = Union[str, list[str]]
MassSpec = Union[float, list[float], list[list[float]]]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --------------------------------------------------------------------------
# Sections
# --------------------------------------------------------------------------


class InitialSection(StrictModel):
    """Initial law of the diffusion."""

    kind: Literal["point", "gaussian", "file", "wave"] = Field(
        "point", description="point mass, Gaussian, sample file, or |psi0|^2 of the wave section"
    )
    value: Optional[list[float]] = Field(None, description="Location of the point mass (default: origin)")
    mean: Optional[list[float]] = Field(None, description="Gaussian mean")
    cov: Optional[list[list[float]]] = Field(None, description="Gaussian covariance matrix")
    path: Optional[str] = Field(None, description="Binary ensemble file or CSV with one column per coordinate")

    @model_validator(mode="after")
    def check_fields(self):
        if self.kind == "gaussian" and (self.mean is None or self.cov is None):
            raise ValueError("a gaussian initial law needs mean and cov")
        if self.kind == "file" and not self.path:
            raise ValueError("a file initial law needs a path")
        return self


class ModelSection(StrictModel):
    dim: int = Field(..., ge=1, description="Dimension d of the state space")
    drift: Optional[ScalarOrVector] = Field(
        None, description="Drift b(t, x): '[e1, ...]' or a list of expressions; omitted for wave bridges"
    )
    diffusion: Union[float, str, list[list[str]]] = Field(
        1.0, description="sigma as a number, a scalar expression (sigma * Id) or d x m matrix rows"
    )
    density: Optional[str] = Field(None, description="Exact density p(t, x), when known")
    initial: InitialSection = Field(default_factory=InitialSection)
    tag: str = Field("", description="Provenance tag stored with the ensemble")


class GridSection(StrictModel):
    t0: float = 0.0
    t1: float = 1.0
    n_steps: int = Field(1000, ge=2)

    @model_validator(mode="after")
    def check_interval(self):
        if not self.t1 > self.t0:
            raise ValueError("t1 must be greater than t0")
        return self


class EnsembleSection(StrictModel):
    n_paths: int = Field(..., ge=1)
    seed: int = Field(0, ge=0)


class WaveSection(StrictModel):
    """Schrödinger equation whose solution drives a bridge diffusion (one dimension)."""

    potential: str = Field(..., description="U(t, x1)")
    sigma: float = Field(1.0, gt=0)
    x0: float = -10.0
    x1: float = 10.0
    dx: float = Field(0.02, gt=0)
    bc: Literal["periodic", "dirichlet"] = "dirichlet"
    dt_pde: float = Field(1e-3, gt=0)
    snapshot_every: int = Field(10, ge=1)
    norm_tolerance: float = Field(1e-8, gt=0)
    initial: Literal["ground", "packet"] = "ground"
    center: float = 0.0
    momentum: float = 0.0
    width: Optional[float] = Field(None, gt=0, description="Position spread of the packet (default sigma / sqrt(2))")


class EstimatorSection(StrictModel):
    h_steps: int = Field(10, ge=1)
    k_neighbors: Optional[int] = Field(None, ge=1)
    method: Literal["knn", "kernel"] = "knn"
    bandwidth: Optional[float] = Field(None, gt=0)
    stride: int = Field(100, ge=1)


class OutputSection(StrictModel):
    directory: Optional[str] = None
    formats: list[Literal["csv", "json", "binary"]] = Field(default_factory=lambda: ["json", "csv"])


# --------------------------------------------------------------------------
# Tasks
# --------------------------------------------------------------------------


class SimulateTask(StrictModel):
    kind: Literal["simulate"] = "simulate"
    at_time: Optional[float] = Field(None, description="Time of the moment checks (default t1)")
    expected_mean: Optional[list[float]] = None
    expected_variance: Optional[list[float]] = None
    n_se: float = 3.0


class NelsonTask(StrictModel):
    kind: Literal["nelson"] = "nelson"
    mu: Literal[-1, 0, 1] = 1
    estimator: EstimatorSection = Field(default_factory=EstimatorSection)
    expected_forward_slope: Optional[float] = None
    expected_backward_slope: Optional[float] = None
    expected_imag_slope: Optional[float] = None
    slope_tolerance: float = 0.05
    real_mean_tolerance: float = 0.02
    expected_second_slope: Optional[float] = None
    second_slope_tolerance: float = 0.07
    product_rule: bool = True
    reversal_check: bool = False
    n_se: float = 3.0
    field_tolerance: float = 0.05
    estimator_tolerance: float = 0.05
    gradient_drift_box: Optional[list[tuple[float, float]]] = None


class EmbedTask(StrictModel):
    kind: Literal["embed"] = "embed"
    degree: int = Field(..., ge=0, le=2)
    coefficients: list[ScalarOrVector]
    forcing: Optional[ScalarOrVector] = None
    mu: Literal[-1, 0, 1] = 1
    form: Literal["standard", "brick", "brick-expanded"] = "standard"
    stride: int = Field(10, ge=1)
    n_se: float = 3.0
    residual_atol: float = 1e-2
    expect_solution: bool = True
    reversal_check: bool = True


class _LagrangianSource(StrictModel):
    potential: Optional[str] = Field(None, description="U(t, x) of the natural Lagrangian v.Mv/2 - U")
    mass: Optional[MassSpec] = None
    lagrangian: Optional[str] = Field(
        None, description="L(t, x, v) in x1..xd and v1..vd, polynomial in v; replaces potential and mass"
    )

    @model_validator(mode="after")
    def check_lagrangian_source(self):
        if (self.potential is None) == (self.lagrangian is None):
            raise ValueError("give exactly one of potential or lagrangian")
        if self.lagrangian is not None and self.mass is not None:
            raise ValueError("mass belongs to a natural Lagrangian; fold it into the lagrangian expression")
        return self


class LagrangianTask(_LagrangianSource):
    kind: Literal["lagrangian"] = "lagrangian"
    mu: Literal[-1, 0, 1] = 1
    stride: int = Field(10, ge=1)
    n_se: float = 3.0
    residual_atol: float = 1e-2
    variation: Optional[list[str]] = Field(None, description="Z(t), default sin(pi (t - t0)/(t1 - t0)) per coordinate")
    epsilons: list[float] = Field(default_factory=lambda: [-0.1, -0.05, 0.05, 0.1])
    stationarity_atol: float = 0.0
    negative_control_drift_scale: Optional[float] = Field(
        None, description="Simulate a control with the drift scaled by this factor"
    )
    negative_control_min_ratio: float = 5.0


class NoetherTask(_LagrangianSource):
    kind: Literal["noether"] = "noether"
    mu: Literal[-1, 0, 1] = 1
    symmetry: Literal["translation", "rotation"] = "translation"
    direction: Optional[list[float]] = None
    plane: Optional[tuple[int, int]] = Field(None, description="0-based coordinate pair of the rotation plane")
    stride: int = Field(10, ge=1)
    tolerance: float = 0.05
    slope_atol: float = 0.0
    expect_conserved: bool = True

    @model_validator(mode="after")
    def check_symmetry(self):
        if self.symmetry == "translation" and self.direction is None:
            raise ValueError("translation symmetry needs a direction")
        if self.symmetry == "rotation" and self.plane is None:
            raise ValueError("rotation symmetry needs a plane")
        return self


class BridgeTask(StrictModel):
    kind: Literal["schrodinger-bridge"] = "schrodinger-bridge"
    compare_times: Optional[list[float]] = Field(None, description="Density comparison times (default t1)")
    bandwidth: Optional[float] = Field(None, gt=0)
    l1_tolerance: float = 0.05
    modulus_tolerance: float = 1e-6
    step_norm_tolerance: float = 1e-10
    convergence_check: bool = True
    convergence_steps: int = Field(20, ge=4)
    convergence_dt: float = Field(0.01, gt=0, description="Coarse time step of the mesh-halving check")
    ratio_range: tuple[float, float] = (3.5, 4.5)


class HamiltonTask(StrictModel):
    kind: Literal["hamilton"] = "hamilton"
    potential: str
    mass: Optional[MassSpec] = None
    mu: Literal[-1, 0, 1] = 1
    stride: int = Field(10, ge=1)
    n_se: float = 3.0
    residual_atol: float = 1e-2
    coherence_tolerance: float = 1e-10


class AlgebraTask(StrictModel):
    kind: Literal["algebra"] = "algebra"
    n_random: int = Field(50, ge=1)
    max_degree: int = Field(3, ge=1)
    seed: int = Field(0, ge=0)


TaskConfig = Annotated[
    Union[
        SimulateTask,
        NelsonTask,
        EmbedTask,
        LagrangianTask,
        NoetherTask,
        BridgeTask,
        HamiltonTask,
        AlgebraTask,
    ],
    Field(discriminator="kind"),
]

TASK_KINDS = (
    "simulate",
    "nelson",
    "embed",
    "lagrangian",
    "noether",
    "schrodinger-bridge",
    "hamilton",
    "algebra",
)


class ExperimentConfig(StrictModel):
    """One experiment: a model, a time grid, an ensemble and at most one task."""

    model: Optional[ModelSection] = None
    grid: Optional[GridSection] = None
    ensemble: Optional[EnsembleSection] = None
    wave: Optional[WaveSection] = None
    task: Optional[TaskConfig] = None
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def check_sections(self):
        if self.task is None or self.task.kind == "algebra":
            return self
        missing = [name for name in ("model", "grid", "ensemble") if getattr(self, name) is None]
        if missing:
            raise ValueError(f"task {self.task.kind!r} needs the sections {missing}")
        if self.task.kind == "schrodinger-bridge" and self.wave is None:
            raise ValueError("the schrodinger-bridge task needs a wave section")
        if self.wave is not None and self.model.dim != 1:
            raise ValueError("wave bridges are one-dimensional")
        if self.model.drift is None and self.wave is None:
            raise ValueError("model.drift is required unless a wave section supplies it")
        if self.model.initial.kind == "wave" and self.wave is None:
            raise ValueError("initial kind 'wave' needs a wave section")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()
