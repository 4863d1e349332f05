"""
Diffusion models and Euler–Maruyama path ensembles.

Path ``i`` draws its initial state and Gaussian increments from its own stream
``SeedSequence(seed, spawn_key=(i,))``, so a path depends only on
(model, grid, seed, i): not on the ensemble size, the block layout or the
number of worker threads. Blocks of ``BLOCK_SIZE`` paths are the unit of work
handed to the thread pool.
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

from app.core.errors import FieldDomainError, LabError, NumericalAbort
from app.services.fieldexpr import (
    FieldExpr,
    constant_field,
    eval_field,
    is_constant,
    matmul_transpose,
    parse_field,
    parse_matrix_field,
    parse_vector_field,
)
from app.services.fields import ExprVectorField, VectorField, as_field

logger = logging.getLogger(__name__)

BLOCK_SIZE = 1024

_MAGIC = b"NLENSEMB"
_HEADER = struct.Struct("<8sIIQddQI")


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError(f"time grid needs t1 > t0, got [{self.t0}, {self.t1}]")
        if self.n_steps < 2:
            raise ValueError(f"time grid needs at least 2 steps, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def t_total(self) -> float:
        """``t0 + t1``: the reflection ``t -> t_total - t`` maps the grid onto itself."""
        return self.t0 + self.t1

    def index_of(self, t: float) -> int:
        """Nearest grid index to ``t``; raises if ``t`` lies off the grid by more than dt/2."""
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k > self.n_steps or abs(self.t0 + k * self.dt - t) > self.dt / 2 + 1e-12:
            raise LabError(f"time {t} is outside the grid [{self.t0}, {self.t1}]")
        return k


# --------------------------------------------------------------------------
# Initial laws
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PointMass:
    value: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.value)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.tile(np.asarray(self.value, dtype=float), (n, 1))


@dataclass(frozen=True, eq=False)
class GaussianLaw:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(len(mean))
        if cov.shape != (len(mean), len(mean)):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {len(mean)}")
        if not np.allclose(cov, cov.T) or np.min(np.linalg.eigvalsh(cov)) < -1e-12:
            raise ValueError("covariance must be symmetric positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        values, vectors = np.linalg.eigh(cov)
        object.__setattr__(self, "_factor", vectors * np.sqrt(np.maximum(values, 0.0)))

    @property
    def dim(self) -> int:
        return len(self.mean)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self._factor.T


@dataclass(frozen=True, eq=False)
class SampleLaw:
    """Resamples rows of an explicit sample with replacement."""

    samples: np.ndarray
    source: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2 or len(samples) == 0:
            raise ValueError("initial sample must be a non-empty 2-D array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("initial sample contains non-finite values")
        object.__setattr__(self, "samples", samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.samples[rng.integers(0, len(self.samples), size=n)]


@dataclass(frozen=True, eq=False)
class TabulatedLaw:
    """One-dimensional law given by density values on a grid, sampled by inverse CDF."""

    xs: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        density = np.asarray(self.density, dtype=float)
        if xs.ndim != 1 or xs.shape != density.shape or len(xs) < 2:
            raise ValueError("tabulated law needs matching 1-D grids of length >= 2")
        if np.any(density < 0) or not np.all(np.diff(xs) > 0):
            raise ValueError("tabulated law needs an increasing grid and a nonnegative density")
        cdf = cumulative_trapezoid(density, xs, initial=0.0)
        if cdf[-1] <= 0:
            raise ValueError("tabulated density has zero mass")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "density", density)
        object.__setattr__(self, "_cdf", cdf / cdf[-1])

    @property
    def dim(self) -> int:
        return 1

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random(n)
        return np.interp(u, self._cdf, self.xs)[:, None]


InitialLaw = Union[PointMass, GaussianLaw, SampleLaw, TabulatedLaw]


def load_initial_samples(path: Union[str, Path]) -> SampleLaw:
    """Read an explicit initial sample.

    A binary ensemble file contributes its states at the final time step; any
    other file is read as CSV with one column per coordinate (``#`` comments
    allowed).
    """
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(len(_MAGIC))
    if head == _MAGIC:
        ensemble = load_ensemble_binary(path)
        return SampleLaw(ensemble.values[:, -1, :], source=str(path))
    samples = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    return SampleLaw(samples, source=str(path))


# --------------------------------------------------------------------------
# Models and ensembles
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """dX = b(t, X) dt + sigma(t, X) dW.

    ``diffusion`` is a scalar expression (meaning ``sigma * Id``) or a ``d x m``
    matrix expression.
    """

    dim: int
    drift: VectorField
    diffusion: FieldExpr
    initial: InitialLaw
    tag: str = ""

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be at least 1")
        if self.drift.dim != self.dim or self.drift.n_components != self.dim:
            raise ValueError(f"drift must be a {self.dim}-vector field of {self.dim} coordinates")
        if self.diffusion.dim != self.dim:
            raise ValueError(f"diffusion must be a field of {self.dim} coordinates")
        if not (self.diffusion.is_scalar or (len(self.diffusion.shape) == 2 and self.diffusion.shape[0] == self.dim)):
            raise ValueError(f"diffusion must be scalar or a {self.dim} x m matrix")
        if self.initial.dim != self.dim:
            raise ValueError(f"initial law has dimension {self.initial.dim}, model has {self.dim}")

    @classmethod
    def from_expressions(
        cls,
        dim: int,
        drift: Union[str, Sequence[str]],
        diffusion: Union[str, float, Sequence[Sequence[str]]],
        initial: InitialLaw,
        tag: str = "",
    ) -> "DiffusionModel":
        drift_expr = parse_vector_field(drift, dim, dim)
        if isinstance(diffusion, (int, float)):
            diffusion_expr = constant_field(float(diffusion), dim)
        elif isinstance(diffusion, str):
            diffusion_expr = parse_field(diffusion, dim)
        else:
            diffusion_expr = parse_matrix_field(diffusion, dim)
        return cls(dim, ExprVectorField(drift_expr), diffusion_expr, initial, tag)

    @property
    def noise_dim(self) -> int:
        return self.dim if self.diffusion.is_scalar else self.diffusion.shape[1]

    def sigma(self, t, x) -> np.ndarray:
        """sigma(t, x) as an array of shape ``(..., d, m)``."""
        values = eval_field(self.diffusion, t, x)
        if self.diffusion.is_scalar:
            return values[..., None, None] * np.eye(self.dim)
        return values

    def diffusion_matrix_expr(self) -> FieldExpr:
        """a = sigma sigma^T as a ``d x d`` expression."""
        if self.diffusion.is_scalar:
            s = self.diffusion * self.diffusion
            zero = constant_field(0.0, self.dim)
            nodes = tuple(
                s.node if i == j else zero.node for i in range(self.dim) for j in range(self.dim)
            )
            return FieldExpr(nodes, self.dim, (self.dim, self.dim))
        return matmul_transpose(self.diffusion)

    def constant_diffusion_matrix(self) -> Optional[np.ndarray]:
        """a as a constant array, or None when sigma depends on (t, x)."""
        if not is_constant(self.diffusion):
            return None
        sigma = self.sigma(0.0, np.zeros(self.dim))
        return sigma @ sigma.T

    def with_drift(self, drift, tag: Optional[str] = None) -> "DiffusionModel":
        return DiffusionModel(self.dim, as_field(drift), self.diffusion, self.initial, tag or self.tag)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    values: np.ndarray
    seed: int
    model_tag: str = ""
    dim: int = field(init=False)
    n_paths: int = field(init=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or values.shape[1] != self.grid.n_steps + 1:
            raise ValueError(
                f"ensemble values must be N x {self.grid.n_steps + 1} x d, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericalAbort("ensemble contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "n_paths", values.shape[0])
        object.__setattr__(self, "dim", values.shape[2])

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def at(self, step: int) -> np.ndarray:
        return self.values[:, step, :]


def path_stream(seed: int, path: int) -> np.random.Generator:
    """The random stream of path ``path``: its initial state, then its increments."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(path,)))


def _draw_block(model: DiffusionModel, grid: TimeGrid, first_path: int, count: int, seed: int):
    x0 = np.empty((count, model.dim))
    xi = np.empty((grid.n_steps, count, model.noise_dim))
    for i in range(count):
        rng = path_stream(seed, first_path + i)
        x0[i] = model.initial.draw(rng, 1)[0]
        xi[:, i, :] = rng.standard_normal((grid.n_steps, model.noise_dim))
    return x0, xi


def _simulate_block(
    model: DiffusionModel, grid: TimeGrid, first_path: int, count: int, seed: int
) -> np.ndarray:
    x, increments = _draw_block(model, grid, first_path, count, seed)
    d = model.dim
    dt = grid.dt
    sqrt_dt = math.sqrt(dt)
    sigma_const = None
    if is_constant(model.diffusion):
        sigma_const = model.sigma(0.0, np.zeros(d))

    out = np.empty((count, grid.n_steps + 1, d))
    out[:, 0, :] = x
    for k in range(grid.n_steps):
        t = grid.t0 + k * dt
        xi = increments[k]
        try:
            drift = model.drift.value(t, x)
            if sigma_const is None:
                noise = np.einsum("pij,pj->pi", model.sigma(t, x), xi)
            else:
                noise = xi @ sigma_const.T
        except FieldDomainError as err:
            raise NumericalAbort(
                f"field evaluation failed at step {k}: {err}", path_index=first_path, step=k
            ) from err
        x = x + drift * dt + noise * sqrt_dt
        bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
        if bad.size:
            path = first_path + int(bad[0])
            raise NumericalAbort(
                f"non-finite state on path {path} at step {k + 1}", path_index=path, step=k + 1
            )
        out[:, k + 1, :] = x
    return out


def simulate_ensemble(
    model: DiffusionModel,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    workers: int = 1,
) -> PathEnsemble:
    """Euler–Maruyama ensemble of ``n_paths`` paths.

    Raises:
        NumericalAbort: a path left the finite reals; carries path index and step.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    n_blocks = -(-n_paths // BLOCK_SIZE)
    counts = [min(BLOCK_SIZE, n_paths - j * BLOCK_SIZE) for j in range(n_blocks)]
    logger.info(
        f"Simulating {n_paths} paths x {grid.n_steps} steps ({n_blocks} blocks, {workers} workers)"
    )
    starts = [j * BLOCK_SIZE for j in range(n_blocks)]
    if workers <= 1 or n_blocks == 1:
        blocks = [_simulate_block(model, grid, s, c, seed) for s, c in zip(starts, counts)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(lambda s, c: _simulate_block(model, grid, s, c, seed), starts, counts))
    values = np.concatenate(blocks, axis=0)
    return PathEnsemble(grid, values, seed, model.tag)


_REVERSED = ":reversed"


def time_reverse(e: PathEnsemble) -> PathEnsemble:
    """Ensemble of X(t0 + t1 - t) on the same grid."""
    tag = e.model_tag[: -len(_REVERSED)] if e.model_tag.endswith(_REVERSED) else e.model_tag + _REVERSED
    return PathEnsemble(e.grid, np.ascontiguousarray(e.values[:, ::-1, :]), e.seed, tag)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def save_ensemble_binary(e: PathEnsemble, path: Union[str, Path]) -> Path:
    """Magic, header (dim, n_steps, n_paths, t0, t1, seed, tag), then little-endian float64 values."""
    path = Path(path)
    tag = e.model_tag.encode("utf-8")
    header = _HEADER.pack(_MAGIC, e.dim, e.grid.n_steps, e.n_paths, e.grid.t0, e.grid.t1, e.seed, len(tag))
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(tag)
        fh.write(np.ascontiguousarray(e.values, dtype="<f8").tobytes())
    return path


def load_ensemble_binary(path: Union[str, Path]) -> PathEnsemble:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[: len(_MAGIC)] != _MAGIC:
        raise LabError(f"{path} is not an ensemble file")
    _, dim, n_steps, n_paths, t0, t1, seed, tag_len = _HEADER.unpack_from(raw)
    offset = _HEADER.size
    tag = raw[offset : offset + tag_len].decode("utf-8")
    offset += tag_len
    expected = n_paths * (n_steps + 1) * dim * 8
    if len(raw) - offset != expected:
        raise LabError(f"{path} is truncated: expected {expected} value bytes")
    values = np.frombuffer(raw, dtype="<f8", offset=offset).reshape(n_paths, n_steps + 1, dim)
    return PathEnsemble(TimeGrid(t0, t1, n_steps), values.astype(float), seed, tag)


def save_ensemble_csv(e: PathEnsemble, path: Union[str, Path]) -> Path:
    """Columns path_id, step, t, x1..xd after a ``#`` header line."""
    path = Path(path)
    n, s1, d = e.values.shape
    path_id = np.repeat(np.arange(n), s1)
    step = np.tile(np.arange(s1), n)
    t = np.tile(e.times, n)
    table = np.column_stack([path_id, step, t, e.values.reshape(n * s1, d)])
    header = (
        f"dim={d} n_steps={e.grid.n_steps} n_paths={n} t0={e.grid.t0!r} "
        f"t1={e.grid.t1!r} seed={e.seed}\n"
        + ",".join(["path_id", "step", "t"] + [f"x{i + 1}" for i in range(d)])
    )
    np.savetxt(path, table, delimiter=",", header=header, fmt=["%d", "%d"] + ["%.17g"] * (d + 1))
    return path


# --------------------------------------------------------------------------
# Moments
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnsembleMoments:
    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    mean_se: np.ndarray
    variance_se: np.ndarray


def ensemble_moments(e: PathEnsemble) -> EnsembleMoments:
    """Per-time mean and variance with standard errors (normal-theory)."""
    n = e.n_paths
    mean = e.values.mean(axis=0)
    centred = e.values - mean
    variance = (centred**2).sum(axis=0) / max(n - 1, 1)
    fourth = (centred**4).mean(axis=0)
    mean_se = np.sqrt(variance / n)
    variance_se = np.sqrt(np.maximum(fourth - variance**2, 0.0) / n)
    return EnsembleMoments(e.times, mean, variance, mean_se, variance_se)
