"""
Experiment runner: validates a TOML config, simulates the ensemble, runs one
task and writes the report with its plot-ready tables.
"""

import logging
import re
import time
import tomllib
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from fastapi import HTTPException, UploadFile
from pydantic import ValidationError
from starlette.concurrency import run_in_threadpool

from app.core.config import config
from app.core.errors import ConfigError, FieldError, LabError, NumericalAbort
from app.models.pydantic.experiment_config import TASK_KINDS, ExperimentConfig
from app.models.pydantic.run_report import RunReport, Verdict
from app.services import hamilton, lagrange, nelson, opalgebra, schrodinger
from app.services.fieldexpr import constant_field, parse_field, parse_phase_field, parse_vector_field
from app.services.fields import combine
from app.services.report_service import jsonable, write_report, write_table
from app.services.sde import (
    DiffusionModel,
    GaussianLaw,
    PathEnsemble,
    PointMass,
    TabulatedLaw,
    TimeGrid,
    ensemble_moments,
    load_initial_samples,
    save_ensemble_binary,
    simulate_ensemble,
    time_reverse,
)

logger = logging.getLogger(__name__)

_TOML_POSITION = re.compile(r"\(at line (\d+), column (\d+)\)")


@dataclass
class _Run:
    """Mutable state of one run: where artifacts go and what has been decided."""

    cfg: ExperimentConfig
    out_dir: Path
    formats: list[str]
    workers: int
    base_dir: Path
    metrics: dict = field(default_factory=dict)
    verdicts: list[Verdict] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.cfg.ensemble.seed if self.cfg.ensemble is not None else 0

    def check(self, name: str, passed: bool, value=None, tolerance=None, detail: str = "") -> None:
        verdict = Verdict(
            name=name,
            passed=bool(passed),
            value=None if value is None else float(value),
            tolerance=None if tolerance is None else float(tolerance),
            detail=detail,
        )
        self.verdicts.append(verdict)
        logger.info(f"Verdict {name}: {'pass' if verdict.passed else 'FAIL'} (value {verdict.value})")

    def table(self, name: str, columns: dict) -> None:
        if "csv" in self.formats:
            self.artifacts.append(str(write_table(self.out_dir / f"{name}.csv", columns)))

    @contextmanager
    def timed(self, label: str):
        started = time.perf_counter()
        try:
            yield
        finally:
            self.timing[label] = self.timing.get(label, 0.0) + time.perf_counter() - started


def _field_steps(grid: TimeGrid, stride: int) -> np.ndarray:
    return np.unique(np.r_[np.arange(0, grid.n_steps + 1, stride), grid.n_steps])


def _parse(location: str, fn, *args):
    try:
        return fn(*args)
    except FieldError as err:
        raise ConfigError(f"invalid expression in {location}", [(location, str(err))]) from err


class ExperimentService:
    """Service that runs experiment configs end to end."""

    def __init__(
        self,
        workers: Optional[int] = None,
        output_dir: Optional[Union[str, Path]] = None,
        formats: Optional[list[str]] = None,
        seed: Optional[int] = None,
    ):
        self.workers = workers
        self.output_dir = None if output_dir is None else Path(output_dir)
        self.formats = formats
        self.seed = seed

    # ------------------------------------------------------------------
    # Config loading
    # ------------------------------------------------------------------

    def parse_config_text(self, text: str, source: str = "<config>") -> ExperimentConfig:
        """Parse and validate TOML text.

        Raises:
            ConfigError: with TOML line/column or pydantic key-path diagnostics.
        """
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as err:
            match = _TOML_POSITION.search(str(err))
            location = f"{source}:{match.group(1)}:{match.group(2)}" if match else source
            raise ConfigError(f"{source} is not valid TOML", [(location, str(err))]) from err
        try:
            return ExperimentConfig.model_validate(raw)
        except ValidationError as err:
            diagnostics = [
                (".".join(str(part) for part in item["loc"]) or "<root>", item["msg"])
                for item in err.errors()
            ]
            raise ConfigError(f"{source} failed validation", diagnostics) from err

    def load_config(self, path: Union[str, Path]) -> ExperimentConfig:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read {path}", [(str(path), str(err))]) from err
        return self.parse_config_text(text, str(path))

    def _apply_overrides(self, cfg: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
        seed = self.seed if seed is None else seed
        if seed is not None and cfg.ensemble is not None:
            cfg = cfg.model_copy(update={"ensemble": cfg.ensemble.model_copy(update={"seed": seed})})
        if self.formats:
            cfg = cfg.model_copy(update={"output": cfg.output.model_copy(update={"formats": list(self.formats)})})
        return cfg

    # ------------------------------------------------------------------
    # Running
    # ------------------------------------------------------------------

    def run_path(self, path: Union[str, Path]) -> RunReport:
        cfg = self.load_config(path)
        return self.run(cfg, base_dir=Path(path).parent)

    def run(
        self,
        cfg: ExperimentConfig,
        base_dir: Optional[Path] = None,
        seed: Optional[int] = None,
    ) -> RunReport:
        """Run the config's task and write report.json.

        Raises:
            NumericalAbort: after flushing a partial report.
        """
        cfg = self._apply_overrides(cfg, seed)
        kind = cfg.task.kind if cfg.task is not None else None
        out_dir = self.output_dir or Path(cfg.output.directory or Path(config.output_dir) / (kind or "empty"))
        out_dir.mkdir(parents=True, exist_ok=True)
        run = _Run(
            cfg=cfg,
            out_dir=out_dir,
            formats=list(cfg.output.formats),
            workers=self.workers or config.workers,
            base_dir=base_dir or Path("."),
        )
        logger.info(f"Running task {kind or '(none)'} into {out_dir}")
        try:
            with run.timed("total"):
                if kind is not None:
                    getattr(self, "_run_" + kind.replace("-", "_"))(run)
        except NumericalAbort as err:
            logger.error(f"Numerical abort: {err}")
            self._finish(run, status="aborted", error=str(err))
            raise
        return self._finish(run)

    def _finish(self, run: _Run, status: str = "completed", error: Optional[str] = None) -> RunReport:
        report_path = run.out_dir / "report.json"
        report = RunReport(
            task=run.cfg.task.kind if run.cfg.task is not None else None,
            config=run.cfg.model_dump(mode="json"),
            config_hash=run.cfg.content_hash(),
            seed=run.seed if run.cfg.ensemble is not None else None,
            metrics=jsonable(run.metrics),
            verdicts=run.verdicts,
            timing=run.timing,
            artifacts=run.artifacts + [str(report_path)],
            status=status,
            error=error,
        )
        write_report(report, run.out_dir)
        logger.info(f"Report written to {report_path} ({'pass' if report.passed else 'fail'})")
        return report

    async def run_uploaded_config(self, config_file: UploadFile, seed: Optional[int] = None) -> RunReport:
        """
        Run an uploaded TOML config in a worker thread.

        Args:
            config_file: The uploaded experiment config
            seed: Optional seed override

        Returns:
            RunReport: The validated run report

        Raises:
            HTTPException: 422 for config errors, 500 for numerical aborts,
                400 for other laboratory errors
        """
        try:
            if not config_file.filename:
                raise HTTPException(status_code=400, detail="No file provided")
            raw = await config_file.read()
            cfg = self.parse_config_text(raw.decode("utf-8"), config_file.filename)
            return await run_in_threadpool(self.run, cfg, None, seed)

        except HTTPException:
            raise
        except UnicodeDecodeError:
            raise HTTPException(status_code=400, detail="Config encoding not supported. Please use UTF-8.")
        except ConfigError as e:
            raise HTTPException(
                status_code=422,
                detail={"message": str(e), "diagnostics": [{"loc": loc, "msg": msg} for loc, msg in e.diagnostics]},
            )
        except NumericalAbort as e:
            raise HTTPException(status_code=500, detail=f"Numerical abort: {e}")
        except LabError as e:
            raise HTTPException(status_code=400, detail=str(e))
        except Exception as e:
            logger.error(f"Error running uploaded config: {str(e)}")
            raise HTTPException(status_code=500, detail="Internal server error running experiment")

    def get_health_status(self) -> dict:
        return {"status": "healthy", "service": "experiments"}

    def get_supported_tasks(self) -> dict:
        return {"tasks": list(TASK_KINDS), "formats": ["csv", "json", "binary"]}

    # ------------------------------------------------------------------
    # Building blocks
    # ------------------------------------------------------------------

    def _initial_law(self, run: _Run, traj: Optional[schrodinger.WaveTrajectory]):
        init = run.cfg.model.initial
        d = run.cfg.model.dim
        if init.kind == "point":
            return PointMass(tuple(init.value if init.value is not None else [0.0] * d))
        if init.kind == "gaussian":
            return GaussianLaw(np.asarray(init.mean), np.asarray(init.cov))
        if init.kind == "file":
            path = Path(init.path)
            return load_initial_samples(path if path.is_absolute() else run.base_dir / path)
        psi0 = traj.snapshot(0)
        return TabulatedLaw(psi0.grid.points, psi0.density())

    def _build_model(self, run: _Run, traj: Optional[schrodinger.WaveTrajectory] = None) -> DiffusionModel:
        m = run.cfg.model
        try:
            initial = self._initial_law(run, traj)
            if m.drift is not None:
                return DiffusionModel.from_expressions(m.dim, m.drift, m.diffusion, initial, m.tag)
            wave = run.cfg.wave
            base = DiffusionModel.from_expressions(1, ["0"], wave.sigma, initial, m.tag or "bridge")
            return base.with_drift(schrodinger.wave_to_drift(traj, wave.sigma))
        except FieldError as err:
            raise ConfigError("invalid model expression", [("model", str(err))]) from err
        except (ValueError, OSError) as err:
            raise ConfigError("invalid model", [("model", str(err))]) from err

    def _grid(self, run: _Run) -> TimeGrid:
        g = run.cfg.grid
        return TimeGrid(g.t0, g.t1, g.n_steps)

    def _simulate(self, run: _Run, model: DiffusionModel, label: str = "ensemble") -> PathEnsemble:
        with run.timed(f"simulate:{label}"):
            e = simulate_ensemble(model, self._grid(run), run.cfg.ensemble.n_paths, run.seed, run.workers)
        if "binary" in run.formats:
            run.artifacts.append(str(save_ensemble_binary(e, run.out_dir / f"{label}.ens")))
        return e

    def _fields(
        self,
        run: _Run,
        model: DiffusionModel,
        e: PathEnsemble,
        traj: Optional[schrodinger.WaveTrajectory],
    ) -> nelson.NelsonFields:
        m = run.cfg.model
        if traj is not None and m.drift is None:
            return schrodinger.density_fields_from_wave(traj, run.cfg.wave.sigma)
        if m.density is not None:
            return nelson.analytic_nelson(model, _parse("model.density", parse_field, m.density, m.dim))
        a = model.constant_diffusion_matrix()
        if a is not None and not np.any(a):
            return nelson.analytic_nelson(model)
        logger.info("No density given; using the KDE of the ensemble at the middle of the grid")
        return nelson.analytic_nelson(model, nelson.estimate_density(e, e.grid.n_steps // 2))

    def _initial_wave(self, run: _Run, grid: schrodinger.SpatialGrid, U) -> tuple[schrodinger.WaveFunction, Optional[float]]:
        w = run.cfg.wave
        t0 = run.cfg.grid.t0 if run.cfg.grid is not None else 0.0
        if w.initial == "ground":
            psi, energy = schrodinger.ground_state(U, w.sigma, grid)
            return replace(psi, t=t0), energy
        width = w.width if w.width is not None else w.sigma / np.sqrt(2.0)
        return schrodinger.gaussian_packet(grid, w.center, w.momentum, width, w.sigma, t0), None

    def _solve_wave(self, run: _Run):
        w = run.cfg.wave
        U = _parse("wave.potential", parse_field, w.potential, 1)
        grid = schrodinger.SpatialGrid.from_spacing(w.x0, w.x1, w.dx, w.bc)
        psi0, energy = self._initial_wave(run, grid, U)
        with run.timed("schrodinger"):
            traj = schrodinger.solve_linear(
                U, w.sigma, grid, psi0, run.cfg.grid.t1 - psi0.t, w.dt_pde, w.snapshot_every, w.norm_tolerance
            )
        if energy is not None:
            run.metrics["ground_energy"] = energy
        return traj, U

    def _prepare(self, run: _Run):
        """Wave (if any), model, ensemble and Nelson fields shared by the field-based tasks."""
        traj = self._solve_wave(run)[0] if run.cfg.wave is not None else None
        model = self._build_model(run, traj)
        e = self._simulate(run, model)
        return traj, model, e, self._fields(run, model, e, traj)

    def _lagrangian(self, run: _Run, potential: str, mass) -> lagrange.LagrangianSpec:
        d = run.cfg.model.dim
        U = _parse("task.potential", parse_field, potential, d)
        try:
            return lagrange.LagrangianSpec(U, None if mass is None else np.asarray(mass, dtype=float))
        except LabError as err:
            raise ConfigError("invalid Lagrangian", [("task.mass", str(err))]) from err

    def _task_lagrangian(self, run: _Run, task) -> lagrange.Lagrangian:
        if task.lagrangian is None:
            return self._lagrangian(run, task.potential, task.mass)
        d = run.cfg.model.dim
        L = _parse("task.lagrangian", parse_phase_field, task.lagrangian, d)
        try:
            return lagrange.ExpressionLagrangian(L, task.lagrangian)
        except LabError as err:
            raise ConfigError("invalid Lagrangian", [("task.lagrangian", str(err))]) from err

    def _vector_or_scalar(self, location: str, source, d: int):
        if isinstance(source, str):
            return _parse(location, parse_field, source, d)
        return _parse(location, parse_vector_field, source, d, d)

    def _residual_table(self, run: _Run, name: str, summary: lagrange.ResidualSummary) -> None:
        columns = {"t": summary.times}
        for i in range(summary.mean.shape[1]):
            columns[f"re_{i + 1}"] = summary.mean[:, i].real
            columns[f"im_{i + 1}"] = summary.mean[:, i].imag
            columns[f"se_re_{i + 1}"] = summary.se_real[:, i]
            columns[f"se_im_{i + 1}"] = summary.se_imag[:, i]
        run.table(name, columns)

    # ------------------------------------------------------------------
    # Tasks
    # ------------------------------------------------------------------

    def _run_simulate(self, run: _Run) -> None:
        task = run.cfg.task
        traj = self._solve_wave(run)[0] if run.cfg.wave is not None else None
        e = self._simulate(run, self._build_model(run, traj))
        moments = ensemble_moments(e)
        step = e.grid.index_of(task.at_time) if task.at_time is not None else e.grid.n_steps
        run.metrics.update(
            {
                "t": float(e.times[step]),
                "mean": moments.mean[step],
                "variance": moments.variance[step],
                "mean_se": moments.mean_se[step],
                "variance_se": moments.variance_se[step],
            }
        )
        for label, expected, value, se in (
            ("mean", task.expected_mean, moments.mean[step], moments.mean_se[step]),
            ("variance", task.expected_variance, moments.variance[step], moments.variance_se[step]),
        ):
            if expected is None:
                continue
            for i, target in enumerate(expected):
                bound = task.n_se * se[i] + 1e-12
                run.check(f"{label}_x{i + 1}", abs(value[i] - target) <= bound, abs(value[i] - target), bound)
        columns = {"t": moments.times}
        for i in range(e.dim):
            columns[f"mean_x{i + 1}"] = moments.mean[:, i]
            columns[f"var_x{i + 1}"] = moments.variance[:, i]
            columns[f"mean_se_x{i + 1}"] = moments.mean_se[:, i]
            columns[f"var_se_x{i + 1}"] = moments.variance_se[:, i]
        run.table("moments", columns)

    def _run_nelson(self, run: _Run) -> None:
        task = run.cfg.task
        s = task.estimator
        traj, model, e, nf = self._prepare(run)
        est = nelson.EstimatorConfig(s.h_steps, s.k_neighbors, s.method, s.bandwidth, s.stride, run.workers)
        steps = est.interior_steps(e.grid)
        with run.timed("estimators"):
            fwd = nelson.forward_series(e, est, steps)
            bwd = nelson.backward_series(e, est, steps)
        dX = nelson.stochastic_derivative(fwd, bwd, task.mu)
        forward_fit = nelson.regression_slope(fwd, e)
        backward_fit = nelson.regression_slope(bwd, e)
        imag_fit = nelson.regression_slope(dX, e, part="imag")
        real_mean = float(np.mean(dX.values.real))
        run.metrics.update(
            {
                "forward_slope": forward_fit.slope,
                "backward_slope": backward_fit.slope,
                "imag_slope": imag_fit.slope,
                "real_mean": real_mean,
                "real_mean_abs": float(np.mean(np.abs(dX.values.real))),
                "k_neighbors": est.neighbors(e.n_paths),
                "process_norm": nelson.process_norm(e, fwd, bwd),
            }
        )
        for name, fit, target in (
            ("forward_slope", forward_fit, task.expected_forward_slope),
            ("backward_slope", backward_fit, task.expected_backward_slope),
            ("imag_slope", imag_fit, task.expected_imag_slope),
        ):
            if target is not None:
                run.check(name, fit.slope_within(target, task.slope_tolerance), fit.slope, task.slope_tolerance)
        if task.expected_imag_slope is not None:
            run.check("real_part_mean", abs(real_mean) < task.real_mean_tolerance, abs(real_mean), task.real_mean_tolerance)

        second = nelson.second_derivative(e, nf, task.mu, steps)
        second_fit = nelson.regression_slope(second, e)
        run.metrics["second_slope"] = second_fit.slope
        if task.expected_second_slope is not None:
            run.check(
                "second_slope",
                second_fit.slope_within(task.expected_second_slope, task.second_slope_tolerance),
                second_fit.slope,
                task.second_slope_tolerance,
            )

        if task.product_rule:
            pr = nelson.product_rule_residual(e, e, est, run.seed)
            run.check("product_rule", pr.within(task.n_se), pr.worst_ratio(), task.n_se, "worst |r|/se")
            run.table("product_rule", {"t": pr.times, "residual": pr.value, "se": pr.se, "lhs": pr.lhs, "rhs": pr.rhs})

        if nf.has_constant_diffusion:
            diff = nelson.nelson_differentiability_check(e, nf, est, task.field_tolerance, task.estimator_tolerance)
            run.metrics["nelson_differentiable"] = diff.per_component
            run.metrics["field_gap"] = diff.field_gap
            run.metrics["estimator_gap"] = diff.estimator_gap

        if task.reversal_check:
            reversed_e = time_reverse(e)
            reversed_fit = nelson.regression_slope(nelson.forward_series(reversed_e, est, steps), reversed_e)
            gap = abs(reversed_fit.slope + backward_fit.slope)
            run.metrics["reversed_forward_slope"] = reversed_fit.slope
            run.check("reversal", gap <= task.slope_tolerance, gap, task.slope_tolerance)

        m = run.cfg.model
        if task.gradient_drift_box is not None and m.density is not None and m.drift is not None:
            report = schrodinger.gradient_drift_check(
                _parse("model.drift", parse_vector_field, m.drift, m.dim, m.dim),
                _parse("model.density", parse_field, m.density, m.dim),
                task.gradient_drift_box,
            )
            run.metrics["gradient_drift"] = {"G_sup": report.g_sup, "div_sup": report.divergence_sup}

        columns = {"t": dX.times}
        for i in range(e.dim):
            columns[f"forward_{i + 1}"] = fwd.values[:, :, i].real.mean(axis=0)
            columns[f"backward_{i + 1}"] = bwd.values[:, :, i].real.mean(axis=0)
            columns[f"re_{i + 1}"] = dX.values[:, :, i].real.mean(axis=0)
            columns[f"im_{i + 1}"] = dX.values[:, :, i].imag.mean(axis=0)
        run.table("derivatives", columns)

    def _run_embed(self, run: _Run) -> None:
        task = run.cfg.task
        d = run.cfg.model.dim
        coefficients = tuple(
            self._vector_or_scalar(f"task.coefficients[{i}]", c, d) for i, c in enumerate(task.coefficients)
        )
        forcing = None if task.forcing is None else self._vector_or_scalar("task.forcing", task.forcing, d)
        try:
            spec = opalgebra.EmbeddedOperatorSpec(task.degree, coefficients, task.mu, task.form, forcing)
        except LabError as err:
            raise ConfigError("invalid embedded operator", [("task", str(err))]) from err
        verdict = opalgebra.is_reversible(spec)
        run.metrics["reversible"] = verdict.reversible
        run.metrics["preserves_reversibility"] = verdict.preserves_reversibility
        run.metrics["reversibility_witness"] = verdict.witness_text()

        traj, model, e, nf = self._prepare(run)
        steps = _field_steps(e.grid, task.stride)
        residual = opalgebra.apply_embedded(spec, e, nf, steps)
        summary = lagrange.summarize_residual(residual, run.seed)
        run.metrics["residual_max_abs_mean"] = summary.max_abs_mean
        run.metrics["residual_max_se"] = summary.max_se
        within = summary.within(task.n_se, task.residual_atol)
        if task.expect_solution:
            run.check("embedded_residual", within, summary.max_abs_mean, task.residual_atol)
        else:
            run.check("embedded_residual_nonzero", not within, summary.max_abs_mean, task.residual_atol)
        self._residual_table(run, "embedded_residual", summary)

        if task.reversal_check and nf.has_constant_diffusion:
            comparison = opalgebra.reversed_residual_check(spec, e, nf, steps, run.seed)
            run.metrics["reversed_residual"] = {
                "original": comparison.original,
                "reversed": comparison.reversed,
                "difference": comparison.difference.as_dict(),
                "consistent": comparison.consistent(task.n_se),
            }

    def _run_lagrangian(self, run: _Run) -> None:
        task = run.cfg.task
        d = run.cfg.model.dim
        L = self._task_lagrangian(run, task)
        traj, model, e, nf = self._prepare(run)
        steps = _field_steps(e.grid, task.stride)

        summary = lagrange.summarize_residual(lagrange.el_residual(e, L, nf, task.mu, steps), run.seed)
        run.metrics["el_residual_max_abs_mean"] = summary.max_abs_mean
        run.check("el_residual", summary.within(task.n_se, task.residual_atol), summary.max_abs_mean, task.residual_atol)
        self._residual_table(run, "el_residual", summary)

        dX = nf.sample(e, task.mu, steps)
        run.metrics["action"] = lagrange.action_functional(e, L, dX)
        if isinstance(L, lagrange.LagrangianSpec):
            kinetic, potential = lagrange.action_parts(e, L, dX)
            run.metrics["kinetic_action"] = kinetic
            run.metrics["potential_action"] = potential

        g = run.cfg.grid
        default = f"sin(pi*(t - ({g.t0!r}))/({g.t1 - g.t0!r}))"
        variation = _parse("task.variation", parse_vector_field, task.variation or [default] * d, d, d)
        try:
            report = lagrange.stationarity_check(e, L, dX, variation, task.epsilons, run.seed)
        except LabError as err:
            raise ConfigError("invalid variation", [("task.variation", str(err))]) from err
        run.metrics["c1"] = report.c1
        run.metrics["c1_se"] = report.c1_se
        run.metrics["delta_action"] = report.delta_action
        run.check("first_variation", report.stationary(task.n_se, task.stationarity_atol), report.ratio, task.n_se, "|c1|/se")

        if task.negative_control_drift_scale is not None:
            scaled = combine((task.negative_control_drift_scale * np.eye(d), model.drift))
            control = self._simulate(run, model.with_drift(scaled, f"{model.tag}:control"), label="control")
            control_report = lagrange.stationarity_check(
                control, L, nf.sample(control, task.mu, steps), variation, task.epsilons, run.seed
            )
            run.metrics["control_c1"] = control_report.c1
            run.check(
                "negative_control_rejected",
                control_report.ratio > task.negative_control_min_ratio,
                control_report.ratio,
                task.negative_control_min_ratio,
                "|c1|/se of the scaled-drift ensemble",
            )

    def _run_noether(self, run: _Run) -> None:
        task = run.cfg.task
        L = self._task_lagrangian(run, task)
        try:
            if task.symmetry == "translation":
                g = lagrange.SymmetryGroupSpec.translation(task.direction)
            else:
                g = lagrange.SymmetryGroupSpec("rotation", plane=task.plane)
        except LabError as err:
            raise ConfigError("invalid symmetry", [("task.symmetry", str(err))]) from err
        traj, model, e, nf = self._prepare(run)
        dX = nf.sample(e, task.mu, _field_steps(e.grid, task.stride))
        report = lagrange.noether_integral(e, L, g, dX, run.seed, task.tolerance, task.slope_atol)
        run.metrics["noether"] = report.to_dict()
        run.check(
            f"noether_{task.symmetry}",
            report.conserved == task.expect_conserved,
            report.max_deviation,
            task.tolerance * report.scale,
            "conserved" if report.conserved else "not conserved",
        )
        run.table(
            "conservation",
            {
                "t": report.times,
                "I_re": report.integral.real,
                "I_im": report.integral.imag,
                "se": report.se,
                "ci_low": report.integral.real - 1.96 * report.se,
                "ci_high": report.integral.real + 1.96 * report.se,
            },
        )

    def _residual_convergence(self, run: _Run, U, n_steps: int) -> tuple[float, float]:
        """Max nonlinear residual on (dx, dt) and on (dx/2, dt/2) over the same window."""
        w = run.cfg.wave
        task = run.cfg.task
        out = []
        for factor in (1, 2):
            grid = schrodinger.SpatialGrid.from_spacing(w.x0, w.x1, w.dx / factor, w.bc)
            psi0, _ = self._initial_wave(run, grid, U)
            dt = task.convergence_dt / factor
            traj = schrodinger.solve_linear(U, w.sigma, grid, psi0, n_steps * task.convergence_dt, dt, 1, w.norm_tolerance)
            out.append(schrodinger.nonlinear_residual(traj, w.sigma**2, w.sigma, U).max_abs)
        return out[0], out[1]

    def _run_schrodinger_bridge(self, run: _Run) -> None:
        task = run.cfg.task
        w = run.cfg.wave
        traj, U = self._solve_wave(run)
        run.metrics["max_step_norm_drift"] = traj.max_step_norm_drift
        run.check("pde_norm_drift", traj.max_step_norm_drift <= task.step_norm_tolerance, traj.max_step_norm_drift, task.step_norm_tolerance)
        if w.initial == "ground":
            modulus = float(np.max(np.abs(np.abs(traj.values) - np.abs(traj.values[0]))))
            run.metrics["modulus_drift"] = modulus
            run.check("stationary_modulus", modulus <= task.modulus_tolerance, modulus, task.modulus_tolerance)

        residual = schrodinger.nonlinear_residual(traj, w.sigma**2, w.sigma, U)
        run.metrics["nonlinear_residual_max"] = residual.max_abs
        run.check("nonlinear_term_vanishes", residual.nonlinear_coefficient == 0.0, residual.nonlinear_coefficient, 0.0)
        if task.convergence_check:
            with run.timed("convergence"):
                coarse, fine = self._residual_convergence(run, U, task.convergence_steps)
            ratio = coarse / fine if fine > 0 else float("inf")
            lo, hi = task.ratio_range
            run.metrics["residual_coarse"] = coarse
            run.metrics["residual_fine"] = fine
            run.check("residual_second_order", lo <= ratio <= hi, ratio, hi, f"expected ratio in [{lo}, {hi}]")

        model = self._build_model(run, traj)
        e = self._simulate(run, model)
        for t in task.compare_times or [run.cfg.grid.t1]:
            match = schrodinger.density_match(e, traj, t, task.bandwidth)
            run.metrics[f"density_match_t{t:g}"] = match.to_dict()
            run.check(f"density_l1_t{t:g}", match.l1 < task.l1_tolerance, match.l1, task.l1_tolerance)
            if "csv" in run.formats:
                run.artifacts.append(str(match.to_csv(run.out_dir / f"density_t{t:g}.csv")))

    def _run_hamilton(self, run: _Run) -> None:
        task = run.cfg.task
        L = self._lagrangian(run, task.potential, task.mass)
        H = hamilton.HamiltonianSpec(L)
        traj, model, e, nf = self._prepare(run)
        steps = _field_steps(e.grid, task.stride)

        dX = nf.sample(e, task.mu, steps)
        P = hamilton.momentum_process(e, L, nf, task.mu, dX=dX)
        legendre = hamilton.legendre_check(e, L, nf, task.mu, P)
        run.check("legendre_map", legendre.coherent, legendre.max_deviation, 1e-12)

        first, second = hamilton.hamilton_residuals(e, H, nf, task.mu, steps)
        el = lagrange.el_residual(e, L, nf, task.mu, steps)
        gap = float(np.max(np.abs(second.values - el.values)))
        run.metrics["first_residual_max"] = float(np.max(np.abs(first.values)))
        run.check("legendre_coherence", gap <= task.coherence_tolerance, gap, task.coherence_tolerance)
        identity_gap = hamilton.hamiltonian_identity_gap(e, H, dX)
        run.check("hamiltonian_identity", identity_gap <= task.coherence_tolerance, identity_gap, task.coherence_tolerance)

        summary = lagrange.summarize_residual(second, run.seed)
        run.check("hamilton_residual", summary.within(task.n_se, task.residual_atol), summary.max_abs_mean, task.residual_atol)
        self._residual_table(run, "hamilton_residual", summary)

        energy = hamilton.energy_drift(e, H, nf, task.mu, steps, run.seed)
        run.metrics["energy_slope"] = energy.slope.as_dict()
        run.metrics["energy_constant"] = energy.constant
        run.table("energy", {"t": energy.times, "mean_re_H": energy.value, "se": energy.se})

    def _run_algebra(self, run: _Run) -> None:
        task = run.cfg.task
        rng = np.random.default_rng(task.seed)
        R = opalgebra.reversibility_transform

        polys = [self._random_poly(rng, task.max_degree) for _ in range(task.n_random)]
        failures = sum(R(R(p)) != p for p in polys)
        run.check("involution", failures == 0, failures, 0, f"{task.n_random} random polynomials")

        d0, d1, dm1 = (opalgebra.build_Dmu(mu) for mu in (0, 1, -1))
        run.check("reversible_derivative", R(d0) == -d0)
        run.check("reverse_of_forward_mode", R(d1) == -dm1)
        expected = opalgebra.OperatorWordPoly.from_dict(
            {
                (opalgebra.D, opalgebra.D_STAR): 0.5,
                (opalgebra.D_STAR, opalgebra.D): 0.5,
                (opalgebra.D, opalgebra.D): 0.5j,
                (opalgebra.D_STAR, opalgebra.D_STAR): -0.5j,
            }
        )
        run.check("square_expansion", d1**2 == expected, detail=str(d1**2))
        run.metrics["square"] = str(d1**2)

        zero, one = constant_field(0.0, 1), constant_field(1.0, 1)
        newton = opalgebra.EmbeddedOperatorSpec(2, (zero, zero, one), mu=1, forcing=parse_field("x1", 1))
        first_order = opalgebra.EmbeddedOperatorSpec(1, (zero, one), mu=1, forcing=parse_field("-x1", 1))
        newton_verdict = opalgebra.is_reversible(newton)
        first_verdict = opalgebra.is_reversible(first_order)
        run.metrics["newton_witness"] = newton_verdict.witness_text()
        run.metrics["first_order_witness"] = first_verdict.witness_text()
        run.check("newton_reversible", newton_verdict.reversible, detail=newton_verdict.matched or "")
        run.check("first_order_not_reversible", not first_verdict.reversible)

    def _random_poly(self, rng: np.random.Generator, max_degree: int) -> opalgebra.OperatorWordPoly:
        terms = {}
        for _ in range(int(rng.integers(1, 6))):
            length = int(rng.integers(0, max_degree + 1))
            word = tuple(opalgebra.LETTERS[int(i)] for i in rng.integers(0, 2, size=length))
            terms[word] = complex(int(rng.integers(-4, 5)), int(rng.integers(-4, 5)))
        return opalgebra.OperatorWordPoly.from_dict(terms)


def get_experiment_service() -> ExperimentService:
    """Dependency injection for ExperimentService."""
    return ExperimentService()
