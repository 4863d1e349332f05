"""
Nelson forward/backward derivatives, the complex stochastic derivative and
its iterates.

Two routes are offered:

* sample estimators (``forward_derivative``, ``backward_derivative`` and their
  series) regress difference quotients on the current state with k nearest
  neighbours, conditioning on X(t) only;
* field composition (``NelsonFields``) evaluates the explicit drift b, the
  backward drift b_* = b - div(a) - a grad(log p) and the stochastic field
  g = (b + b_*)/2 + i mu (b - b_*)/2 along the paths, and differentiates
  functions of (t, X) with the chain rule
  ``D_mu f = d_t f + g . grad f + (i mu / 2) a : Hess f``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid
from sklearn.neighbors import KNeighborsRegressor

from app.core.config import config
from app.core.errors import EstimatorError, LabError, ShapeMismatchError
from app.services.fieldexpr import FieldExpr, divergence_field, eval_field
from app.services.fields import (
    ComplexVectorField,
    ExprVectorField,
    ScoreField,
    TabulatedField,
    TimeReversedField,
    VectorField,
    ZeroField,
    combine,
)
from app.services.resampling import bootstrap_mean_series
from app.services.sde import DiffusionModel, PathEnsemble, TimeGrid

logger = logging.getLogger(__name__)

# queries per k-NN prediction call
_PREDICT_CHUNK = 20_000

MU_VALUES = (-1, 0, 1)


class SampleKind(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    STOCHASTIC = "stochastic"
    SECOND = "second"
    MOMENTUM = "momentum"
    FUNCTION = "function"
    RESIDUAL = "residual"


def _check_mu(mu: int) -> int:
    if mu not in MU_VALUES:
        raise LabError(f"mu must be one of {MU_VALUES}, got {mu}")
    return int(mu)


@dataclass(frozen=True, eq=False)
class ComplexProcessSample:
    """Per-path complex values ``values[p, s, k]`` at grid indices ``steps[s]``."""

    grid: TimeGrid
    steps: np.ndarray
    values: np.ndarray
    kind: SampleKind
    mu: Optional[int] = None

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=int)
        values = np.asarray(self.values, dtype=complex)
        if values.ndim != 3 or values.shape[1] != len(steps):
            raise ShapeMismatchError(
                f"sample values must be N x {len(steps)} x k, got {values.shape}"
            )
        if len(steps) and (steps.min() < 0 or steps.max() > self.grid.n_steps):
            raise ShapeMismatchError("sample steps fall outside the time grid")
        if not np.all(np.isfinite(values)):
            raise LabError(f"{self.kind.value} sample contains non-finite values")
        if self.kind in (SampleKind.FORWARD, SampleKind.BACKWARD) and np.any(values.imag):
            raise LabError(f"{self.kind.value} derivative must be real")
        values.setflags(write=False)
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "values", values)

    @property
    def times(self) -> np.ndarray:
        return self.grid.t0 + self.grid.dt * self.steps

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def n_components(self) -> int:
        return self.values.shape[2]

    def conj(self) -> "ComplexProcessSample":
        mu = None if self.mu is None else -self.mu
        return replace(self, values=np.conj(self.values), mu=mu)

    def same_layout(self, other: "ComplexProcessSample") -> bool:
        return (
            self.grid == other.grid
            and self.values.shape == other.values.shape
            and np.array_equal(self.steps, other.steps)
        )

    def linear_combination(self, a: complex, other: "ComplexProcessSample", b: complex) -> "ComplexProcessSample":
        if not self.same_layout(other):
            raise ShapeMismatchError("samples differ in grid, steps or shape")
        return replace(self, values=a * self.values + b * other.values)

    def at_steps(self, steps: Sequence[int]) -> "ComplexProcessSample":
        index = np.searchsorted(self.steps, steps)
        if np.any(index >= len(self.steps)) or not np.array_equal(self.steps[index], steps):
            raise ShapeMismatchError("requested steps are not present in the sample")
        return replace(self, steps=np.asarray(steps), values=self.values[:, index, :])

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Columns path_id, step, t, re_1..re_k, im_1..im_k."""
        path = Path(path)
        n, s, k = self.values.shape
        table = np.column_stack(
            [
                np.repeat(np.arange(n), s),
                np.tile(self.steps, n),
                np.tile(self.times, n),
                self.values.real.reshape(n * s, k),
                self.values.imag.reshape(n * s, k),
            ]
        )
        names = ["path_id", "step", "t"] + [f"re_{i + 1}" for i in range(k)] + [f"im_{i + 1}" for i in range(k)]
        np.savetxt(
            path, table, delimiter=",", header=",".join(names), comments="",
            fmt=["%d", "%d"] + ["%.17g"] * (1 + 2 * k),
        )
        return path


# --------------------------------------------------------------------------
# Sample estimators
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorConfig:
    h_steps: int = 1
    k_neighbors: Optional[int] = None
    method: str = "knn"
    bandwidth: Optional[float] = None
    stride: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.h_steps < 1:
            raise EstimatorError("h_steps must be at least 1")
        if self.stride < 1:
            raise EstimatorError("stride must be at least 1")
        if self.method not in ("knn", "kernel"):
            raise EstimatorError(f"unknown estimator method {self.method!r}")

    def neighbors(self, n_paths: int) -> int:
        k = self.k_neighbors if self.k_neighbors is not None else math.ceil(math.sqrt(n_paths))
        if k < 1 or k > n_paths:
            raise EstimatorError(f"k_neighbors={k} must lie in [1, {n_paths}]")
        return k

    def interior_steps(self, grid: TimeGrid) -> np.ndarray:
        """Grid indices where both difference quotients exist."""
        return np.arange(self.h_steps, grid.n_steps - self.h_steps + 1, self.stride)


def _silverman(features: np.ndarray) -> float:
    n, d = features.shape
    spread = float(np.mean(features.std(axis=0)))
    return max(spread, 1e-12) * (4.0 / (d + 2.0) / n) ** (1.0 / (d + 4.0))


def _gaussian_weights(bandwidth: float):
    def weights(distances: np.ndarray) -> np.ndarray:
        # rows are rescaled by their nearest distance so weights never all underflow
        shifted = distances**2 - np.min(distances, axis=1, keepdims=True) ** 2
        return np.exp(-shifted / (2.0 * bandwidth**2))

    return weights


def conditional_mean(features: np.ndarray, targets: np.ndarray, cfg: EstimatorConfig) -> np.ndarray:
    """E[target | feature] at every sample's own feature value.

    ``features`` is ``N x d``; ``targets`` is ``N x m`` real or complex.
    Complex targets are regressed on their real and imaginary parts, which
    makes the estimator C-linear.
    """
    n = len(features)
    k = cfg.neighbors(n)
    is_complex = np.iscomplexobj(targets)
    y = np.hstack([targets.real, targets.imag]) if is_complex else np.asarray(targets, dtype=float)
    if np.all(np.ptp(features, axis=0) == 0.0):
        out = np.broadcast_to(y.mean(axis=0), y.shape).copy()
    else:
        if cfg.method == "knn":
            weights = "uniform"
        else:
            weights = _gaussian_weights(cfg.bandwidth or _silverman(features))
        model = KNeighborsRegressor(n_neighbors=k, weights=weights, n_jobs=cfg.workers)
        model.fit(features, y)
        out = np.empty_like(y)
        for start in range(0, n, _PREDICT_CHUNK):
            out[start : start + _PREDICT_CHUNK] = model.predict(features[start : start + _PREDICT_CHUNK])
    if is_complex:
        m = targets.shape[1]
        return out[:, :m] + 1j * out[:, m:]
    return out


def _difference_quotient(e: PathEnsemble, t_index: int, cfg: EstimatorConfig, forward: bool) -> np.ndarray:
    h = cfg.h_steps
    if forward and not 0 <= t_index <= e.grid.n_steps - h:
        raise EstimatorError(f"t_index={t_index} leaves no room for a forward step of {h}")
    if not forward and not h <= t_index <= e.grid.n_steps:
        raise EstimatorError(f"t_index={t_index} leaves no room for a backward step of {h}")
    x = e.values[:, t_index, :]
    other = e.values[:, t_index + h if forward else t_index - h, :]
    quotient = (other - x) / (h * e.grid.dt) if forward else (x - other) / (h * e.grid.dt)
    return conditional_mean(x, quotient, cfg)


def _as_config(h_steps: int, k_neighbors: Optional[int], cfg: Optional[EstimatorConfig]) -> EstimatorConfig:
    if cfg is not None:
        return cfg
    return EstimatorConfig(h_steps=h_steps, k_neighbors=k_neighbors)


def forward_derivative(
    e: PathEnsemble,
    t_index: int,
    h_steps: int = 1,
    k_neighbors: Optional[int] = None,
    cfg: Optional[EstimatorConfig] = None,
) -> ComplexProcessSample:
    """k-NN estimate of E[(X(t+h) - X(t))/h | X(t)] on every path."""
    cfg = _as_config(h_steps, k_neighbors, cfg)
    values = _difference_quotient(e, t_index, cfg, forward=True)
    return ComplexProcessSample(e.grid, np.array([t_index]), values[:, None, :], SampleKind.FORWARD)


def backward_derivative(
    e: PathEnsemble,
    t_index: int,
    h_steps: int = 1,
    k_neighbors: Optional[int] = None,
    cfg: Optional[EstimatorConfig] = None,
) -> ComplexProcessSample:
    """k-NN estimate of E[(X(t) - X(t-h))/h | X(t)] on every path."""
    cfg = _as_config(h_steps, k_neighbors, cfg)
    values = _difference_quotient(e, t_index, cfg, forward=False)
    return ComplexProcessSample(e.grid, np.array([t_index]), values[:, None, :], SampleKind.BACKWARD)


def _series(e: PathEnsemble, cfg: EstimatorConfig, steps, forward: bool) -> ComplexProcessSample:
    steps = cfg.interior_steps(e.grid) if steps is None else np.asarray(steps, dtype=int)
    values = np.empty((e.n_paths, len(steps), e.dim))
    for j, s in enumerate(steps):
        values[:, j, :] = _difference_quotient(e, int(s), cfg, forward)
    kind = SampleKind.FORWARD if forward else SampleKind.BACKWARD
    logger.debug(f"Estimated {kind.value} derivative at {len(steps)} times")
    return ComplexProcessSample(e.grid, steps, values, kind)


def forward_series(e: PathEnsemble, cfg: EstimatorConfig, steps: Optional[Sequence[int]] = None) -> ComplexProcessSample:
    return _series(e, cfg, steps, forward=True)


def backward_series(e: PathEnsemble, cfg: EstimatorConfig, steps: Optional[Sequence[int]] = None) -> ComplexProcessSample:
    return _series(e, cfg, steps, forward=False)


def _mu_combine(f: np.ndarray, b: np.ndarray, mu: int) -> np.ndarray:
    if not np.any(f.imag) and not np.any(b.imag):
        out = np.empty(f.shape, dtype=complex)
        out.real = (f.real + b.real) / 2.0
        out.imag = mu * (f.real - b.real) / 2.0
        return out
    return (f + b) / 2.0 + 0.5j * mu * (f - b)


def stochastic_derivative(
    fwd: ComplexProcessSample, bwd: ComplexProcessSample, mu: int = 1
) -> ComplexProcessSample:
    """(D + D_*)/2 + i mu (D - D_*)/2 from matching forward and backward samples."""
    mu = _check_mu(mu)
    if not fwd.same_layout(bwd):
        raise ShapeMismatchError("forward and backward samples differ in grid, steps or shape")
    values = _mu_combine(fwd.values, bwd.values, mu)
    return ComplexProcessSample(fwd.grid, fwd.steps, values, SampleKind.STOCHASTIC, mu)


def quadratic_variation(
    e: PathEnsemble,
    t_index: int,
    h_steps: int = 1,
    k_neighbors: Optional[int] = None,
    cfg: Optional[EstimatorConfig] = None,
) -> np.ndarray:
    """Per-path estimate of E[dX dX^T / h | X(t)], shape ``N x d x d``."""
    cfg = _as_config(h_steps, k_neighbors, cfg)
    h = cfg.h_steps
    if not 0 <= t_index <= e.grid.n_steps - h:
        raise EstimatorError(f"t_index={t_index} leaves no room for a forward step of {h}")
    x = e.values[:, t_index, :]
    dx = e.values[:, t_index + h, :] - x
    outer = np.einsum("pi,pj->pij", dx, dx).reshape(e.n_paths, -1) / (h * e.grid.dt)
    return conditional_mean(x, outer, cfg).reshape(e.n_paths, e.dim, e.dim)


# --------------------------------------------------------------------------
# Densities
# --------------------------------------------------------------------------

_DEFAULT_POINTS = {1: 400, 2: 80, 3: 30}


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    axes: tuple[np.ndarray, ...]
    values: np.ndarray
    bandwidth: np.ndarray
    time: float
    step: int
    point_mass: bool = False
    location: Optional[np.ndarray] = None
    kde: Optional[stats.gaussian_kde] = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return len(self.axes) if not self.point_mass else len(self.location)

    def integral(self) -> float:
        if self.point_mass:
            return 1.0
        total = self.values
        for axis in reversed(self.axes):
            total = trapezoid(total, axis, axis=-1)
        return float(total)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Density at ``points`` (``M x d``); zero everywhere for a point mass."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.point_mass:
            return np.zeros(len(points))
        return self.kde(points.T)

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Grid coordinates followed by p."""
        path = Path(path)
        if self.point_mass:
            table = np.append(self.location, np.inf)[None, :]
        else:
            mesh = np.meshgrid(*self.axes, indexing="ij")
            table = np.column_stack([m.ravel() for m in mesh] + [self.values.ravel()])
        names = [f"x{i + 1}" for i in range(self.dim)] + ["p"]
        np.savetxt(path, table, delimiter=",", header=",".join(names), comments="", fmt="%.17g")
        return path


def estimate_density(
    e: PathEnsemble,
    t_index: int,
    bandwidth: Optional[float] = None,
    axes: Optional[Sequence[np.ndarray]] = None,
    n_points: Optional[int] = None,
    extent_sd: float = 6.0,
) -> DensityEstimate:
    """Gaussian KDE of X(t) with Silverman's bandwidth unless ``bandwidth`` is given.

    ``bandwidth`` is an absolute kernel width; in several dimensions it is
    relative to the mean coordinate spread. The KDE is tabulated on ``axes``
    or on a grid of ``extent_sd`` standard deviations around the mean.
    """
    if e.n_paths < 100:
        raise EstimatorError(f"density estimation needs at least 100 paths, got {e.n_paths}")
    samples = e.values[:, t_index, :]
    time = float(e.times[t_index])
    spread = samples.std(axis=0)
    if np.any(np.ptp(samples, axis=0) == 0.0):
        logger.warning(f"Degenerate sample at t={time}: reporting a point mass")
        return DensityEstimate(
            axes=(), values=np.empty(0), bandwidth=np.zeros(e.dim), time=time,
            step=t_index, point_mass=True, location=samples.mean(axis=0),
        )
    bw_method = "silverman" if bandwidth is None else bandwidth / float(np.mean(spread))
    kde = stats.gaussian_kde(samples.T, bw_method=bw_method)
    if axes is None:
        n = n_points or _DEFAULT_POINTS.get(e.dim, 16)
        centre = samples.mean(axis=0)
        axes = [np.linspace(c - extent_sd * s, c + extent_sd * s, n) for c, s in zip(centre, spread)]
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.vstack([m.ravel() for m in mesh])
    values = np.maximum(kde(points), 0.0).reshape(mesh[0].shape)
    return DensityEstimate(
        axes=axes,
        values=values,
        bandwidth=np.sqrt(np.diag(kde.covariance)),
        time=time,
        step=t_index,
        kde=kde,
    )


# --------------------------------------------------------------------------
# Explicit Nelson fields
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NelsonFields:
    """Forward drift, score and diffusion of a Markov diffusion.

    ``score`` is grad(log p), zero below the density floor. ``diffusion`` is the
    constant matrix a when sigma is constant; otherwise ``diffusion_expr`` holds
    a(t, x).
    """

    drift: VectorField
    score: Optional[VectorField]
    diffusion: Optional[np.ndarray]
    diffusion_expr: Optional[FieldExpr] = None
    density: Optional[VectorField] = None

    @property
    def dim(self) -> int:
        return self.drift.dim

    @property
    def has_constant_diffusion(self) -> bool:
        return self.diffusion is not None

    def constant_diffusion(self) -> np.ndarray:
        if self.diffusion is None:
            raise LabError("this operation requires a constant diffusion matrix")
        return self.diffusion

    def diffusion_at(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.diffusion is not None:
            return np.broadcast_to(self.diffusion, x.shape[:-1] + self.diffusion.shape)
        return eval_field(self.diffusion_expr, t, x)

    def _no_noise(self) -> bool:
        return self.diffusion is not None and not np.any(self.diffusion)

    def correction(self, t, x) -> np.ndarray:
        """(1/p) d_j (a^{ij} p) = div(a) + a grad(log p)."""
        x = np.asarray(x, dtype=float)
        if self._no_noise():
            return np.zeros(x.shape)
        if self.score is None:
            raise LabError("a density is required to compute the backward drift")
        out = np.einsum("...ij,...j->...i", self.diffusion_at(t, x), self.score.value(t, x))
        if self.diffusion is None:
            out = out + eval_field(divergence_field(self.diffusion_expr), t, x)
        return out

    def forward(self, t, x) -> np.ndarray:
        return self.drift.value(t, x)

    def backward(self, t, x) -> np.ndarray:
        return self.forward(t, x) - self.correction(t, x)

    def stochastic_value(self, t, x, mu: int = 1) -> np.ndarray:
        """g = b - c/2 + i mu c/2 with c = b - b_*."""
        c = self.correction(t, x)
        return self.forward(t, x) - 0.5 * c + 0.5j * mu * c

    def backward_field(self) -> VectorField:
        a = self.constant_diffusion()
        if self._no_noise():
            return self.drift
        return combine((np.eye(self.dim), self.drift), (-a, self._require_score()))

    def stochastic_field(self, mu: int = 1) -> ComplexVectorField:
        """g as a differentiable field; requires constant a."""
        mu = _check_mu(mu)
        a = self.constant_diffusion()
        if self._no_noise():
            return ComplexVectorField(self.drift, ZeroField(self.dim))
        score = self._require_score()
        re = combine((np.eye(self.dim), self.drift), (-0.5 * a, score))
        im = combine((0.5 * mu * a, score)) if mu else ZeroField(self.dim)
        return ComplexVectorField(re, im)

    def _require_score(self) -> VectorField:
        if self.score is None:
            raise LabError("a density is required to compute the backward drift")
        return self.score

    def sample(self, e: PathEnsemble, mu: int = 1, steps: Optional[Sequence[int]] = None) -> ComplexProcessSample:
        """D_mu X evaluated along the ensemble."""
        mu = _check_mu(mu)
        steps = _all_steps(e) if steps is None else np.asarray(steps, dtype=int)
        values = np.empty((e.n_paths, len(steps), e.dim), dtype=complex)
        for j, s in enumerate(steps):
            values[:, j, :] = self.stochastic_value(e.times[s], e.values[:, s, :], mu)
        return ComplexProcessSample(e.grid, steps, values, SampleKind.STOCHASTIC, mu)

    def forward_sample(self, e: PathEnsemble, steps: Optional[Sequence[int]] = None) -> ComplexProcessSample:
        return self._real_sample(e, steps, self.forward, SampleKind.FORWARD)

    def backward_sample(self, e: PathEnsemble, steps: Optional[Sequence[int]] = None) -> ComplexProcessSample:
        return self._real_sample(e, steps, self.backward, SampleKind.BACKWARD)

    def _real_sample(self, e, steps, fn, kind) -> ComplexProcessSample:
        steps = _all_steps(e) if steps is None else np.asarray(steps, dtype=int)
        values = np.stack([fn(e.times[s], e.values[:, s, :]) for s in steps], axis=1)
        return ComplexProcessSample(e.grid, steps, values.astype(complex), kind)

    def time_reversed(self, grid: TimeGrid) -> "NelsonFields":
        """Fields of X(t0 + t1 - t): drift -b_*(T - t), backward drift -b(T - t)."""
        t_total = grid.t_total
        score = None if self.score is None else TimeReversedField(self.score, t_total)
        density = None if self.density is None else TimeReversedField(self.density, t_total)
        return NelsonFields(
            drift=TimeReversedField(self.backward_field(), t_total, sign=-1.0),
            score=score,
            diffusion=self.diffusion,
            density=density,
        )


def _all_steps(e: PathEnsemble) -> np.ndarray:
    return np.arange(e.grid.n_steps + 1)


def _tabulated_score(density: DensityEstimate) -> tuple[TabulatedField, TabulatedField]:
    p = density.values
    keep = p > config.density_floor * p.max()
    log_p = np.log(np.where(keep, p, p[keep].min()))
    grads = np.gradient(log_p, *density.axes, edge_order=2) if density.dim > 1 else [
        np.gradient(log_p, density.axes[0], edge_order=2)
    ]
    score = np.stack([np.where(keep, g, 0.0) for g in grads], axis=-1)
    return (
        TabulatedField(density.axes, score, strict=True),
        TabulatedField(density.axes, p, strict=True),
    )


def analytic_nelson(
    model: DiffusionModel,
    density: Union[FieldExpr, DensityEstimate, None] = None,
) -> NelsonFields:
    """Explicit b, b_* of ``model`` given its density.

    ``density`` is an exact expression p(t, x) or a KDE (whose score is frozen
    in time). It may be omitted only when the diffusion vanishes.
    """
    a = model.constant_diffusion_matrix()
    a_expr = None if a is not None else model.diffusion_matrix_expr()
    if isinstance(density, FieldExpr):
        if not density.is_scalar or density.dim != model.dim:
            raise LabError(f"density must be a scalar field of {model.dim} coordinates")
        score = ScoreField(density, floor=config.density_floor, span=config.density_search_span)
        density_field = ExprVectorField(density)
    elif isinstance(density, DensityEstimate):
        if density.point_mass:
            raise EstimatorError("a point-mass density has no score")
        if density.dim != model.dim:
            raise LabError(f"density has dimension {density.dim}, model has {model.dim}")
        score, density_field = _tabulated_score(density)
    elif density is None:
        if a is None or np.any(a):
            raise LabError("a density is required when the diffusion does not vanish")
        score, density_field = None, None
    else:
        raise LabError(f"unsupported density type {type(density).__name__}")
    return NelsonFields(model.drift, score, a, a_expr, density_field)


def exact_density_fields(model: DiffusionModel, density_expr: FieldExpr) -> NelsonFields:
    return analytic_nelson(model, density_expr)


# --------------------------------------------------------------------------
# Field composition
# --------------------------------------------------------------------------


def _compose(fld: VectorField, t: float, x: np.ndarray, g: np.ndarray, a: np.ndarray, mu: int) -> np.ndarray:
    """d_t f + J f . g + (i mu / 2) a : Hess f, per path."""
    out = fld.time_derivative(t, x) + np.einsum("pkj,pj->pk", fld.jacobian(t, x), g)
    if mu:
        out = out + 0.5j * mu * np.einsum("pij,pkij->pk", a, fld.hessian(t, x))
    return out


def derivative_of_field(
    fld: VectorField,
    e: PathEnsemble,
    nf: NelsonFields,
    mu: int = 1,
    steps: Optional[Sequence[int]] = None,
    kind: SampleKind = SampleKind.FUNCTION,
) -> ComplexProcessSample:
    """D_mu of the process f(t, X(t)) for a (real or complex) field f."""
    mu = _check_mu(mu)
    steps = _all_steps(e) if steps is None else np.asarray(steps, dtype=int)
    values = np.empty((e.n_paths, len(steps), fld.n_components), dtype=complex)
    for j, s in enumerate(steps):
        t, x = e.times[s], e.values[:, s, :]
        g = nf.stochastic_value(t, x, mu)
        values[:, j, :] = _compose(fld, t, x, g, nf.diffusion_at(t, x), mu)
    return ComplexProcessSample(e.grid, steps, values, kind, mu)


def derivative_of_function(
    f: FieldExpr,
    e: PathEnsemble,
    nf: NelsonFields,
    mu: int = 1,
    steps: Optional[Sequence[int]] = None,
) -> ComplexProcessSample:
    """D_mu f(t, X(t)) = d_t f + D_mu X . grad f + (i mu / 2) a : Hess f."""
    if f.dim != e.dim:
        raise ShapeMismatchError(f"field has {f.dim} coordinates, ensemble has {e.dim}")
    return derivative_of_field(ExprVectorField(f), e, nf, mu, steps)


def second_derivative(
    e: PathEnsemble,
    nf: NelsonFields,
    mu: int = 1,
    steps: Optional[Sequence[int]] = None,
) -> ComplexProcessSample:
    """D_mu D_mu X by composing D_mu with the field g of D_mu X."""
    return derivative_of_field(nf.stochastic_field(mu), e, nf, mu, steps, kind=SampleKind.SECOND)


def second_derivative_chained(
    e: PathEnsemble,
    nf: NelsonFields,
    mu: int,
    cfg: EstimatorConfig,
    steps: Optional[Sequence[int]] = None,
) -> ComplexProcessSample:
    """Cross-check of the second derivative: k-NN estimators applied to Y = g(t, X)."""
    mu = _check_mu(mu)
    steps = cfg.interior_steps(e.grid) if steps is None else np.asarray(steps, dtype=int)
    h = cfg.h_steps
    needed = sorted({int(s) + o for s in steps for o in (-h, 0, h)})
    if needed[0] < 0 or needed[-1] > e.grid.n_steps:
        raise EstimatorError("chained estimate needs h_steps of room on both sides")
    y = {s: nf.stochastic_value(e.times[s], e.values[:, s, :], mu) for s in needed}
    width = h * e.grid.dt
    values = np.empty((e.n_paths, len(steps), e.dim), dtype=complex)
    for j, s in enumerate(steps):
        s = int(s)
        x = e.values[:, s, :]
        fwd = conditional_mean(x, (y[s + h] - y[s]) / width, cfg)
        bwd = conditional_mean(x, (y[s] - y[s - h]) / width, cfg)
        values[:, j, :] = _mu_combine(fwd, bwd, mu)
    return ComplexProcessSample(e.grid, steps, values, SampleKind.SECOND, mu)


# --------------------------------------------------------------------------
# Diagnostics
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SeriesReport:
    """A per-time statistic with bootstrap standard errors."""

    times: np.ndarray
    value: np.ndarray
    se: np.ndarray

    def within(self, n_se: float = 3.0, atol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.value) <= n_se * self.se + atol))

    def worst_ratio(self) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(self.value) / self.se
        ratio = np.where(self.se > 0, ratio, np.where(self.value == 0, 0.0, np.inf))
        return float(np.max(ratio)) if ratio.size else 0.0


@dataclass(frozen=True, eq=False)
class ProductRuleReport(SeriesReport):
    lhs: np.ndarray = field(default=None)
    rhs: np.ndarray = field(default=None)


def product_rule_residual(
    eX: PathEnsemble,
    eY: PathEnsemble,
    cfg: EstimatorConfig,
    seed: int = 0,
    n_resamples: Optional[int] = None,
) -> ProductRuleReport:
    """r(t) = d/dt E[X.Y] - E[DX.Y + X.D_*Y] at interior times.

    d/dt E[X.Y] is the central difference of the ensemble mean over 2h; the
    standard errors come from resampling whole paths.
    """
    if eX.grid != eY.grid or eX.n_paths != eY.n_paths or eX.dim != eY.dim:
        raise ShapeMismatchError("product rule needs ensembles on the same grid with the same shape")
    h = cfg.h_steps
    steps = cfg.interior_steps(eX.grid)
    dx = forward_series(eX, cfg, steps).values.real
    dy = backward_series(eY, cfg, steps).values.real
    x = eX.values[:, steps, :]
    y = eY.values[:, steps, :]
    prod_after = np.sum(eX.values[:, steps + h, :] * eY.values[:, steps + h, :], axis=2)
    prod_before = np.sum(eX.values[:, steps - h, :] * eY.values[:, steps - h, :], axis=2)
    lhs = (prod_after - prod_before) / (2 * h * eX.grid.dt)
    rhs = np.sum(dx * y + x * dy, axis=2)
    boot = bootstrap_mean_series(lhs - rhs, seed, n_resamples)
    times = eX.times[steps]
    return ProductRuleReport(times, boot.mean, boot.se, lhs=lhs.mean(axis=0), rhs=rhs.mean(axis=0))


@dataclass(frozen=True, eq=False)
class DifferentiabilityReport:
    field_gap: np.ndarray
    flux_sup: Optional[np.ndarray]
    estimator_gap: np.ndarray
    field_tolerance: float
    estimator_tolerance: float

    @property
    def per_component(self) -> np.ndarray:
        return (self.field_gap <= self.field_tolerance) & (self.estimator_gap <= self.estimator_tolerance)

    @property
    def differentiable(self) -> bool:
        return bool(np.all(self.per_component))


def nelson_differentiability_check(
    e: PathEnsemble,
    nf: NelsonFields,
    cfg: EstimatorConfig,
    field_tolerance: float = 0.05,
    estimator_tolerance: float = 0.05,
) -> DifferentiabilityReport:
    """Compare D and D_* per component, from the fields and from the estimators.

    The field statistic is sup |b - b_*| = sup |(1/p) d_j (a^{ij} p)| over the
    visited states; with a known density the unnormalised flux
    sup |d_j (a^{ij} p)| is reported as well. The estimator statistic is the
    root mean square of D^X - D^_*X.
    """
    nf.constant_diffusion()
    steps = cfg.interior_steps(e.grid)
    field_gap = np.zeros(e.dim)
    flux = np.zeros(e.dim) if nf.density is not None else None
    for s in steps:
        t, x = e.times[s], e.values[:, s, :]
        gap = np.abs(nf.correction(t, x))
        field_gap = np.maximum(field_gap, gap.max(axis=0))
        if flux is not None:
            flux = np.maximum(flux, (gap * nf.density.value(t, x)).max(axis=0))
    fwd = forward_series(e, cfg, steps).values.real
    bwd = backward_series(e, cfg, steps).values.real
    estimator_gap = np.sqrt(np.mean((fwd - bwd) ** 2, axis=(0, 1)))
    report = DifferentiabilityReport(field_gap, flux, estimator_gap, field_tolerance, estimator_tolerance)
    logger.info(
        f"Nelson differentiability per component: {report.per_component.tolist()} "
        f"(field gap {field_gap.tolist()}, estimator gap {estimator_gap.tolist()})"
    )
    return report


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    slope_se: float
    rvalue: float

    def slope_within(self, target: float, tolerance: float) -> bool:
        return abs(self.slope - target) <= tolerance


def regression_slope(
    estimate: ComplexProcessSample,
    regressor: Union[PathEnsemble, np.ndarray],
    component: int = 0,
    part: str = "real",
    regressor_component: Optional[int] = None,
) -> RegressionResult:
    """Least-squares slope of one part of ``estimate`` on the regressor, pooled over paths and times."""
    if isinstance(regressor, PathEnsemble):
        regressor = regressor.values[:, estimate.steps, :]
    regressor = np.asarray(regressor, dtype=float)
    rc = component if regressor_component is None else regressor_component
    values = estimate.values[:, :, component]
    y = values.real if part == "real" else values.imag
    x = regressor[..., rc]
    if x.shape != y.shape:
        raise ShapeMismatchError(f"regressor shape {x.shape} does not match estimate {y.shape}")
    fit = stats.linregress(x.ravel(), y.ravel())
    return RegressionResult(float(fit.slope), float(fit.intercept), float(fit.stderr), float(fit.rvalue))


def imaginary_pairing(
    dX: ComplexProcessSample,
    eX: PathEnsemble,
    dY: ComplexProcessSample,
    eY: PathEnsemble,
    seed: int = 0,
    n_resamples: Optional[int] = None,
) -> SeriesReport:
    """E[Im(D X).Y] - E[X.Im(D Y)] per time."""
    if not dX.same_layout(dY):
        raise ShapeMismatchError("derivative samples differ in layout")
    x = eX.values[:, dX.steps, :]
    y = eY.values[:, dY.steps, :]
    z = np.sum(dX.values.imag * y - x * dY.values.imag, axis=2)
    boot = bootstrap_mean_series(z, seed, n_resamples)
    return SeriesReport(dX.times, boot.mean, boot.se)


def process_norm(e: PathEnsemble, fwd: ComplexProcessSample, bwd: ComplexProcessSample) -> dict[str, float]:
    """Empirical sup-in-time L2 norms of X, DX and D_*X."""

    def sup_l2(values: np.ndarray) -> float:
        return float(np.sqrt(np.max(np.mean(np.sum(np.abs(values) ** 2, axis=-1), axis=0))))

    parts = {
        "x": sup_l2(e.values),
        "forward": sup_l2(fwd.values),
        "backward": sup_l2(bwd.values),
    }
    parts["total"] = sum(parts.values())
    return parts
