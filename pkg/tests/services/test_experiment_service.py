"""
Unit and integration tests for the ExperimentService.
"""
import json
import re
from unittest.mock import AsyncMock, Mock, patch

import pytest
from fastapi import HTTPException, UploadFile

from app.core.errors import ConfigError, NumericalAbort
from app.services.experiment_service import ExperimentService

OU_SECTIONS = """
[model]
dim = 1
drift = "[-x1]"
diffusion = 1.0
density = "exp(-x1^2)/sqrt(pi)"

[model.initial]
kind = "gaussian"
mean = [0.0]
cov = [[0.5]]

[grid]
t0 = 0.0
t1 = 1.0
n_steps = {n_steps}

[ensemble]
n_paths = {n_paths}
seed = 2
"""

COHERENT_SECTIONS = """
[model]
dim = 1
drift = "[-(x1 - cos(t)) - sin(t)]"
diffusion = 1.0
density = "exp(-(x1 - cos(t))^2)/sqrt(pi)"

[model.initial]
kind = "gaussian"
mean = [1.0]
cov = [[0.5]]

[grid]
t1 = 1.0
n_steps = 50

[ensemble]
n_paths = 1000
seed = 4
"""


def ou(task: str, n_paths: int = 500, n_steps: int = 50) -> str:
    return OU_SECTIONS.format(n_paths=n_paths, n_steps=n_steps) + "\n" + task


def upload(text: bytes, filename: str = "experiment.toml") -> Mock:
    mock_file = Mock(spec=UploadFile)
    mock_file.filename = filename
    mock_file.read = AsyncMock(return_value=text)
    return mock_file


class TestConfigParsing:
    """Validation of experiment configs."""

    def setup_method(self):
        self.service = ExperimentService()

    @pytest.mark.unit
    def test_valid_config(self, small_ou_config):
        cfg = self.service.parse_config_text(small_ou_config)
        assert cfg.task.kind == "simulate"
        assert cfg.ensemble.n_paths == 2500
        assert cfg.output.formats == ["json", "csv"]
        assert len(cfg.content_hash()) == 64

    @pytest.mark.unit
    def test_bundled_configs_validate(self, configs_dir):
        """Every shipped config parses."""
        paths = sorted(configs_dir.glob("*.toml"))
        assert len(paths) >= 10
        for path in paths:
            assert self.service.load_config(path).task is not None

    @pytest.mark.unit
    def test_malformed_toml_reports_position(self):
        with pytest.raises(ConfigError) as excinfo:
            self.service.parse_config_text("[model\ndim = 1\n", "bad.toml")
        loc, _ = excinfo.value.diagnostics[0]
        assert re.fullmatch(r"bad\.toml:\d+:\d+", loc)

    @pytest.mark.unit
    def test_unknown_key_reports_path(self):
        with pytest.raises(ConfigError) as excinfo:
            self.service.parse_config_text('[model]\ndim = 1\ncolour = "red"\n')
        assert "model.colour" in [loc for loc, _ in excinfo.value.diagnostics]

    @pytest.mark.unit
    def test_missing_sections(self):
        with pytest.raises(ConfigError) as excinfo:
            self.service.parse_config_text('[task]\nkind = "simulate"\n')
        loc, msg = excinfo.value.diagnostics[0]
        assert loc == "<root>"
        assert "model" in msg

    @pytest.mark.unit
    def test_negative_seed_rejected(self):
        with pytest.raises(ConfigError) as excinfo:
            self.service.parse_config_text(ou('[task]\nkind = "simulate"').replace("seed = 2", "seed = -1"))
        assert excinfo.value.diagnostics[0][0] == "ensemble.seed"

    @pytest.mark.unit
    def test_lagrangian_source_is_exclusive(self):
        both = '[task]\nkind = "lagrangian"\npotential = "0.5*x1^2"\nlagrangian = "0.5*v1^2"\n'
        neither = '[task]\nkind = "noether"\ndirection = [1.0]\n'
        with_mass = '[task]\nkind = "lagrangian"\nlagrangian = "0.5*v1^2"\nmass = 2.0\n'
        for task in (both, neither, with_mass):
            with pytest.raises(ConfigError) as excinfo:
                self.service.parse_config_text(ou(task))
            assert excinfo.value.diagnostics[0][0].startswith("task.")

    @pytest.mark.unit
    def test_lagrangian_must_be_polynomial_in_velocity(self, tmp_path):
        task = '[task]\nkind = "lagrangian"\nlagrangian = "exp(v1) - 0.5*x1^2"\n'
        service = ExperimentService(output_dir=tmp_path)
        with pytest.raises(ConfigError) as excinfo:
            service.run(service.parse_config_text(ou(task)))
        assert excinfo.value.diagnostics[0][0] == "task.lagrangian"

    @pytest.mark.unit
    def test_lagrangian_unknown_velocity(self, tmp_path):
        task = '[task]\nkind = "lagrangian"\nlagrangian = "0.5*v2^2 - 0.5*x1^2"\n'
        service = ExperimentService(output_dir=tmp_path)
        with pytest.raises(ConfigError) as excinfo:
            service.run(service.parse_config_text(ou(task)))
        assert excinfo.value.diagnostics[0][0] == "task.lagrangian"

    @pytest.mark.unit
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            self.service.load_config(tmp_path / "nope.toml")


class TestRunning:
    """End-to-end runs of small configs."""

    @pytest.mark.unit
    def test_empty_config(self, tmp_path):
        service = ExperimentService(output_dir=tmp_path)
        report = service.run(service.parse_config_text(""))
        assert report.task is None
        assert report.verdicts == []
        assert report.exit_code == 0
        assert (tmp_path / "report.json").exists()

    @pytest.mark.integration
    def test_simulate(self, tmp_path, write_config, small_ou_config):
        service = ExperimentService(output_dir=tmp_path / "out")
        report = service.run_path(write_config(small_ou_config))
        assert report.passed
        assert {v.name for v in report.verdicts} == {"mean_x1", "variance_x1"}
        assert (tmp_path / "out" / "moments.csv").read_text().startswith("t,mean_x1,var_x1")
        data = json.loads((tmp_path / "out" / "report.json").read_text())
        assert data["seed"] == 1
        assert data["config_hash"] == report.config_hash

    @pytest.mark.integration
    def test_binary_output_independent_of_workers(self, tmp_path, small_ou_config):
        outputs = []
        for workers in (1, 3):
            service = ExperimentService(workers=workers, output_dir=tmp_path / str(workers), formats=["binary", "json"])
            service.run(service.parse_config_text(small_ou_config))
            outputs.append((tmp_path / str(workers) / "ensemble.ens").read_bytes())
        assert outputs[0] == outputs[1]
        assert not (tmp_path / "1" / "moments.csv").exists()

    @pytest.mark.unit
    def test_seed_override(self, tmp_path, small_ou_config):
        service = ExperimentService(output_dir=tmp_path, seed=5)
        cfg = service.parse_config_text(small_ou_config)
        assert service.run(cfg).seed == 5
        assert service.run(cfg, seed=9).config["ensemble"]["seed"] == 9

    @pytest.mark.unit
    def test_algebra(self, tmp_path, algebra_config):
        service = ExperimentService(output_dir=tmp_path)
        report = service.run(service.parse_config_text(algebra_config))
        assert report.passed
        assert report.seed is None
        assert report.metrics["square"] == "0.5i·D·D + 0.5·D·D_* + 0.5·D_*·D - 0.5i·D_*·D_*"

    @pytest.mark.integration
    def test_failed_expectation(self, tmp_path, small_ou_config):
        service = ExperimentService(output_dir=tmp_path)
        report = service.run(service.parse_config_text(small_ou_config.replace("expected_mean = [0.0]", "expected_mean = [5.0]")))
        assert not report.passed
        assert report.exit_code == 1

    @pytest.mark.integration
    def test_nelson(self, tmp_path):
        task = """
[task]
kind = "nelson"
expected_forward_slope = -1.0
expected_backward_slope = 1.0
slope_tolerance = 0.2
product_rule = false

[task.estimator]
h_steps = 5
stride = 10
"""
        service = ExperimentService(output_dir=tmp_path)
        report = service.run(service.parse_config_text(ou(task, n_paths=3000, n_steps=100)))
        assert {v.name for v in report.verdicts} >= {"forward_slope", "backward_slope"}
        assert report.metrics["forward_slope"] < 0 < report.metrics["backward_slope"]
        assert "second_slope" in report.metrics
        assert (tmp_path / "derivatives.csv").exists()

    @pytest.mark.integration
    def test_embed(self, tmp_path):
        task = """
[task]
kind = "embed"
degree = 2
coefficients = ["0", "0", "1"]
forcing = "x1"
"""
        service = ExperimentService(output_dir=tmp_path)
        report = service.run(service.parse_config_text(ou(task)))
        assert report.passed
        assert report.metrics["reversible"] is True
        assert report.metrics["reversed_residual"]["consistent"] is True

    @pytest.mark.integration
    def test_lagrangian(self, tmp_path):
        task = '[task]\nkind = "lagrangian"\npotential = "0.5*x1^2"\n'
        service = ExperimentService(output_dir=tmp_path)
        report = service.run(service.parse_config_text(ou(task, n_paths=2000)))
        verdicts = {v.name: v for v in report.verdicts}
        assert verdicts["el_residual"].passed
        assert "first_variation" in verdicts
        assert len(report.metrics["action"]) == 2
        assert (tmp_path / "el_residual.csv").exists()

    @pytest.mark.integration
    def test_lagrangian_expression(self, tmp_path):
        """A gauge term x1*v1 leaves the residual of the natural Lagrangian unchanged."""
        natural = '[task]\nkind = "lagrangian"\npotential = "0.5*x1^2"\n'
        written = '[task]\nkind = "lagrangian"\nlagrangian = "0.5*v1^2 - 0.5*x1^2 + x1*v1"\n'
        reports = []
        for task in (natural, written):
            service = ExperimentService(output_dir=tmp_path / str(len(reports)))
            reports.append(service.run(service.parse_config_text(ou(task, n_paths=2000))))
        baseline, report = reports
        verdicts = {v.name: v for v in report.verdicts}
        assert verdicts["el_residual"].passed
        assert "first_variation" in verdicts
        assert "kinetic_action" not in report.metrics
        assert report.metrics["el_residual_max_abs_mean"] == pytest.approx(
            baseline.metrics["el_residual_max_abs_mean"], abs=1e-8
        )

    @pytest.mark.integration
    def test_noether_broken_symmetry(self, tmp_path):
        task = '[task]\nkind = "noether"\npotential = "0.5*x1^2"\ndirection = [1.0]\nexpect_conserved = false\n'
        service = ExperimentService(output_dir=tmp_path)
        report = service.run(service.parse_config_text(COHERENT_SECTIONS + task))
        assert report.passed
        assert report.metrics["noether"]["verdict"] == "not conserved"
        assert (tmp_path / "conservation.csv").exists()

    @pytest.mark.integration
    def test_hamilton(self, tmp_path):
        task = '[task]\nkind = "hamilton"\npotential = "0.5*x1^2"\n'
        service = ExperimentService(output_dir=tmp_path)
        report = service.run(service.parse_config_text(ou(task)))
        assert report.passed
        assert {"legendre_map", "legendre_coherence", "hamiltonian_identity", "hamilton_residual"} <= {
            v.name for v in report.verdicts
        }
        assert report.metrics["energy_constant"] is True

    @pytest.mark.integration
    def test_schrodinger_bridge(self, tmp_path):
        text = """
[model]
dim = 1

[model.initial]
kind = "wave"

[grid]
t1 = 0.5
n_steps = 50

[ensemble]
n_paths = 3000
seed = 6

[wave]
potential = "0.5*x1^2"
x0 = -6.0
x1 = 6.0
dx = 0.05
dt_pde = 0.01
snapshot_every = 5

[task]
kind = "schrodinger-bridge"
l1_tolerance = 0.1
convergence_steps = 10
"""
        service = ExperimentService(output_dir=tmp_path)
        report = service.run(service.parse_config_text(text))
        assert report.passed, [v for v in report.verdicts if not v.passed]
        assert report.metrics["ground_energy"] == pytest.approx(0.5, abs=1e-3)
        assert (tmp_path / "density_t0.5.csv").exists()

    @pytest.mark.unit
    def test_blowup_writes_aborted_report(self, tmp_path, blowup_config):
        service = ExperimentService(output_dir=tmp_path)
        with pytest.raises(NumericalAbort) as excinfo:
            service.run(service.parse_config_text(blowup_config))
        assert excinfo.value.path_index == 0
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["status"] == "aborted"
        assert data["error"]

    @pytest.mark.unit
    def test_file_initial_law(self, tmp_path, write_config):
        (tmp_path / "init.csv").write_text("2.0\n2.0\n2.0\n")
        text = """
[model]
dim = 1
drift = "[0]"
diffusion = 0.0

[model.initial]
kind = "file"
path = "init.csv"

[grid]
n_steps = 10

[ensemble]
n_paths = 20

[task]
kind = "simulate"
expected_mean = [2.0]
"""
        report = ExperimentService(output_dir=tmp_path / "out").run_path(write_config(text))
        assert report.passed
        assert report.metrics["mean"] == [2.0]


class TestUploads:
    """The async upload entry point used by the HTTP layer."""

    def setup_method(self):
        self.service = ExperimentService()

    @pytest.mark.asyncio
    @pytest.mark.unit
    async def test_run_uploaded_config_success(self, tmp_path, algebra_config):
        service = ExperimentService(output_dir=tmp_path)
        report = await service.run_uploaded_config(upload(algebra_config.encode("utf-8")))
        assert report.task == "algebra"
        assert report.passed

    @pytest.mark.asyncio
    @pytest.mark.unit
    async def test_run_uploaded_config_invalid(self):
        with pytest.raises(HTTPException) as excinfo:
            await self.service.run_uploaded_config(upload(b'[task]\nkind = "simulate"\n'))
        assert excinfo.value.status_code == 422
        assert excinfo.value.detail["diagnostics"][0]["loc"] == "<root>"

    @pytest.mark.asyncio
    @pytest.mark.unit
    async def test_run_uploaded_config_not_utf8(self):
        with pytest.raises(HTTPException) as excinfo:
            await self.service.run_uploaded_config(upload(b"\xff\xfe\x00bad"))
        assert excinfo.value.status_code == 400
        assert "UTF-8" in excinfo.value.detail

    @pytest.mark.asyncio
    @pytest.mark.unit
    async def test_run_uploaded_config_no_filename(self, algebra_config):
        with pytest.raises(HTTPException) as excinfo:
            await self.service.run_uploaded_config(upload(algebra_config.encode("utf-8"), filename=""))
        assert excinfo.value.status_code == 400

    @pytest.mark.asyncio
    @pytest.mark.unit
    async def test_run_uploaded_config_abort(self, tmp_path, blowup_config):
        service = ExperimentService(output_dir=tmp_path)
        with pytest.raises(HTTPException) as excinfo:
            await service.run_uploaded_config(upload(blowup_config.encode("utf-8")))
        assert excinfo.value.status_code == 500
        assert excinfo.value.detail.startswith("Numerical abort")

    @pytest.mark.asyncio
    @pytest.mark.unit
    async def test_run_uploaded_config_unexpected_error(self, algebra_config):
        with patch.object(ExperimentService, "run", side_effect=RuntimeError("boom")):
            with pytest.raises(HTTPException) as excinfo:
                await self.service.run_uploaded_config(upload(algebra_config.encode("utf-8")))
        assert excinfo.value.status_code == 500
        assert "boom" not in excinfo.value.detail

    @pytest.mark.unit
    def test_get_health_status(self):
        assert self.service.get_health_status() == {"status": "healthy", "service": "experiments"}

    @pytest.mark.unit
    def test_get_supported_tasks(self):
        result = self.service.get_supported_tasks()
        assert "schrodinger-bridge" in result["tasks"]
        assert result["formats"] == ["csv", "json", "binary"]
