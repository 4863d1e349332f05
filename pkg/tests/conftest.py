"""
Test configuration and fixtures for the experiment runner and its services.
"""
from pathlib import Path

import pytest
from fastapi import FastAPI
from fastapi.testclient import TestClient

from app.api.v1.experiments import router
from app.services.experiment_service import ExperimentService, get_experiment_service


@pytest.fixture
def app(tmp_path):
    """Create FastAPI app for testing; runs write into a temporary directory."""
    app = FastAPI()
    app.include_router(router, prefix="/api/v1")
    app.dependency_overrides[get_experiment_service] = lambda: ExperimentService(output_dir=tmp_path / "api")
    return app


@pytest.fixture
def client(app):
    """Create test client."""
    return TestClient(app)


@pytest.fixture
def configs_dir():
    """Path to the bundled experiment configs."""
    return Path(__file__).parent.parent / "configs"


@pytest.fixture
def write_config(tmp_path):
    """Write TOML text to a file in the temporary directory and return its path."""

    def write(text: str, name: str = "experiment.toml") -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return write


@pytest.fixture
def small_ou_config():
    """A desk-scale stationary Ornstein-Uhlenbeck simulation."""
    return """
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
n_steps = 50

[ensemble]
n_paths = 2500
seed = 1

[task]
kind = "simulate"
expected_mean = [0.0]
expected_variance = [0.5]
n_se = 5.0
""".strip()


@pytest.fixture
def blowup_config():
    """A deterministic explosion x' = x^3 that leaves the floats within a few steps."""
    return """
[model]
dim = 1
drift = "[x1^3]"
diffusion = 0.0

[model.initial]
kind = "point"
value = [10.0]

[grid]
t0 = 0.0
t1 = 5.0
n_steps = 50

[ensemble]
n_paths = 4
seed = 0

[task]
kind = "simulate"
""".strip()


@pytest.fixture
def algebra_config():
    return '[task]\nkind = "algebra"\nn_random = 10\n'
