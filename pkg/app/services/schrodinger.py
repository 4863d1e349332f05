"""
One-dimensional Schrödinger equation i s^2 d_t psi = -s^4/2 psi'' + U psi
(s the diffusion scale), and the bridge between wave functions and diffusions.

For K = s^2 the drift of the diffusion is b = s^2 (Re + Im)(psi'/psi) and its
density is |psi|^2.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import sparse, stats
from scipy.sparse.linalg import eigsh, splu

from app.core.config import config
from app.core.errors import LabError, NumericalAbort, ShapeMismatchError
from app.services.fieldexpr import (
    FieldExpr,
    add,
    depends_on_time,
    diff_node,
    eval_field,
    jacobian_field,
    mul,
    sub,
)
from app.services.fields import TabulatedField
from app.services.nelson import NelsonFields, estimate_density
from app.services.sde import PathEnsemble

logger = logging.getLogger(__name__)

BOUNDARY_CONDITIONS = ("periodic", "dirichlet")


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform grid on [x0, x1].

    Periodic grids hold x0 + k dx for k < n (the right end is identified with
    the left); Dirichlet grids hold the n interior nodes.
    """

    x0: float
    x1: float
    n: int
    bc: str = "periodic"

    def __post_init__(self):
        if not self.x1 > self.x0:
            raise LabError(f"spatial domain needs x1 > x0, got [{self.x0}, {self.x1}]")
        if self.n < 8:
            raise LabError("spatial grid needs at least 8 nodes")
        if self.bc not in BOUNDARY_CONDITIONS:
            raise LabError(f"boundary condition must be one of {BOUNDARY_CONDITIONS}")

    @classmethod
    def from_spacing(cls, x0: float, x1: float, dx: float, bc: str = "periodic") -> "SpatialGrid":
        cells = int(round((x1 - x0) / dx))
        return cls(x0, x1, cells if bc == "periodic" else cells - 1, bc)

    @property
    def dx(self) -> float:
        cells = self.n if self.bc == "periodic" else self.n + 1
        return (self.x1 - self.x0) / cells

    @property
    def points(self) -> np.ndarray:
        offset = 0 if self.bc == "periodic" else 1
        return self.x0 + self.dx * (np.arange(self.n) + offset)

    def laplacian(self) -> sparse.csr_matrix:
        n = self.n
        main = -2.0 * np.ones(n)
        off = np.ones(n - 1)
        lap = sparse.diags([off, main, off], [-1, 0, 1], format="lil")
        if self.bc == "periodic":
            lap[0, n - 1] = 1.0
            lap[n - 1, 0] = 1.0
        return (lap / self.dx**2).tocsr()

    def _padded(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.bc == "periodic":
            return np.roll(values, -1, axis=-1), np.roll(values, 1, axis=-1)
        zero = np.zeros(values.shape[:-1] + (1,), dtype=values.dtype)
        right = np.concatenate([values[..., 1:], zero], axis=-1)
        left = np.concatenate([zero, values[..., :-1]], axis=-1)
        return right, left

    def gradient(self, values: np.ndarray) -> np.ndarray:
        """Central difference along the last axis."""
        right, left = self._padded(values)
        return (right - left) / (2.0 * self.dx)

    def second_difference(self, values: np.ndarray) -> np.ndarray:
        right, left = self._padded(values)
        return (right - 2.0 * values + left) / self.dx**2


@dataclass(frozen=True, eq=False)
class WaveFunction:
    grid: SpatialGrid
    values: np.ndarray
    t: float
    sigma: float
    K: Optional[float] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        if values.shape != (self.grid.n,):
            raise ShapeMismatchError(f"wave function needs {self.grid.n} values, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericalAbort("wave function contains non-finite values")
        object.__setattr__(self, "values", values)
        if self.K is None:
            object.__setattr__(self, "K", self.sigma**2)

    def norm(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2) * self.grid.dx)

    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def normalized(self) -> "WaveFunction":
        return replace(self, values=self.values / math.sqrt(self.norm()))


@dataclass(frozen=True, eq=False)
class WaveTrajectory:
    grid: SpatialGrid
    times: np.ndarray
    values: np.ndarray
    sigma: float
    K: Optional[float] = None
    max_step_norm_drift: float = 0.0

    def __post_init__(self):
        if self.K is None:
            object.__setattr__(self, "K", self.sigma**2)

    def snapshot(self, i: int) -> WaveFunction:
        return WaveFunction(self.grid, self.values[i], float(self.times[i]), self.sigma, self.K)

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        spacing = np.min(np.diff(self.times)) if len(self.times) > 1 else 0.0
        if abs(self.times[i] - t) > spacing / 2 + 1e-12:
            raise LabError(f"time {t} is outside the wave trajectory")
        return i

    def at_time(self, t: float) -> WaveFunction:
        return self.snapshot(self.index_of(t))

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Columns t, x, re, im."""
        path = Path(path)
        s, n = self.values.shape
        table = np.column_stack(
            [np.repeat(self.times, n), np.tile(self.grid.points, s), self.values.real.ravel(), self.values.imag.ravel()]
        )
        np.savetxt(path, table, delimiter=",", header="t,x,re,im", comments="", fmt="%.17g")
        return path


def _potential_values(U: FieldExpr, t: float, grid: SpatialGrid) -> np.ndarray:
    if U.dim != 1 or not U.is_scalar:
        raise LabError("the potential must be a scalar field of one coordinate")
    return eval_field(U, t, grid.points[:, None])


def hamiltonian_matrix(U: FieldExpr, sigma: float, grid: SpatialGrid, t: float = 0.0) -> sparse.csr_matrix:
    """H = -sigma^4/2 Laplacian + U on the grid."""
    return (-0.5 * sigma**4 * grid.laplacian() + sparse.diags(_potential_values(U, t, grid))).tocsr()


def _boundary_mass(psi: np.ndarray, grid: SpatialGrid) -> float:
    edge = max(1, grid.n // 20)
    rho = np.abs(psi) ** 2
    return float((rho[:edge].sum() + rho[-edge:].sum()) * grid.dx)


def solve_linear(
    U: FieldExpr,
    sigma: float,
    grid: SpatialGrid,
    psi0: WaveFunction,
    t_end: float,
    dt_pde: float,
    snapshot_every: int = 1,
    norm_tolerance: float = 1e-8,
) -> WaveTrajectory:
    """Crank–Nicolson integration of the linear equation from psi0.t to psi0.t + t_end.

    Raises:
        NumericalAbort: singular factorisation, non-finite values or a norm
            drift above ``norm_tolerance``.
    """
    if psi0.grid != grid:
        raise ShapeMismatchError("initial wave function lives on a different grid")
    if abs(psi0.norm() - 1.0) > 1e-6:
        raise LabError(f"initial wave function must be normalized (norm {psi0.norm():.8f})")
    n_steps = int(round(t_end / dt_pde))
    if n_steps < 1 or abs(n_steps * dt_pde - t_end) > 1e-9 * max(1.0, t_end):
        raise LabError(f"t_end={t_end} is not a whole number of steps of {dt_pde}")
    if _boundary_mass(psi0.values, grid) >= 1e-6:
        logger.warning("Initial wave function has boundary mass above 1e-6; widen the domain")

    identity = sparse.identity(grid.n, format="csr", dtype=complex)
    factor = 1j * dt_pde / (2.0 * sigma**2)
    time_dependent = depends_on_time(U)

    def factorise(t_mid: float):
        H = hamiltonian_matrix(U, sigma, grid, t_mid)
        try:
            lu = splu((identity + factor * H).tocsc())
        except RuntimeError as err:
            raise NumericalAbort(f"Crank–Nicolson factorisation failed: {err}") from err
        return lu, (identity - factor * H).tocsr()

    lu, rhs = factorise(psi0.t)
    psi = psi0.values.copy()
    norm0 = psi0.norm()
    previous = norm0
    worst_step = 0.0
    times = [psi0.t]
    snapshots = [psi.copy()]
    for k in range(n_steps):
        t = psi0.t + k * dt_pde
        if time_dependent:
            lu, rhs = factorise(t + 0.5 * dt_pde)
        psi = lu.solve(rhs @ psi)
        if not np.all(np.isfinite(psi)):
            raise NumericalAbort(f"non-finite wave function at step {k + 1}", step=k + 1)
        current = float(np.sum(np.abs(psi) ** 2) * grid.dx)
        worst_step = max(worst_step, abs(current - previous))
        previous = current
        if abs(current - norm0) > norm_tolerance:
            logger.error(f"Norm drift {abs(current - norm0):.3g} at step {k + 1}")
            raise NumericalAbort(f"norm drift beyond {norm_tolerance} at step {k + 1}", step=k + 1)
        if (k + 1) % snapshot_every == 0 or k + 1 == n_steps:
            times.append(psi0.t + (k + 1) * dt_pde)
            snapshots.append(psi.copy())
    logger.info(f"Crank–Nicolson: {n_steps} steps, worst per-step norm change {worst_step:.2e}")
    return WaveTrajectory(grid, np.array(times), np.array(snapshots), sigma, psi0.K, worst_step)


def ground_state(U: FieldExpr, sigma: float, grid: SpatialGrid) -> tuple[WaveFunction, float]:
    """Lowest eigenvector of the discrete Hamiltonian at t = 0, with its energy."""
    H = hamiltonian_matrix(U, sigma, grid)
    shift = float(np.min(_potential_values(U, 0.0, grid))) - 1.0
    energies, vectors = eigsh(H, k=1, sigma=shift, which="LM")
    vector = vectors[:, 0]
    if vector.sum() < 0:
        vector = -vector
    psi = WaveFunction(grid, vector.astype(complex), 0.0, sigma).normalized()
    return psi, float(energies[0])


def gaussian_packet(
    grid: SpatialGrid,
    center: float,
    momentum: float,
    width: float,
    sigma: float,
    t: float = 0.0,
) -> WaveFunction:
    """Gaussian with position spread ``width`` and current velocity ``momentum``."""
    x = grid.points
    values = np.exp(-((x - center) ** 2) / (4.0 * width**2) + 1j * momentum * (x - center) / sigma**2)
    return WaveFunction(grid, values, t, sigma).normalized()


@dataclass(frozen=True, eq=False)
class NonlinearResidual:
    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    nonlinear_coefficient: float

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values[self.mask]))) if np.any(self.mask) else 0.0


def nonlinear_residual(
    traj: WaveTrajectory,
    K: float,
    sigma: float,
    U: FieldExpr,
    floor: Optional[float] = None,
) -> NonlinearResidual:
    """iK d_t psi + K(K - s^2)/2 (psi')^2/psi + K s^2/2 psi'' - U psi at interior snapshots.

    Central differences in t and x; nodes with |psi| below ``floor`` times the
    snapshot maximum are masked. At K = s^2 the nonlinear term is skipped.
    """
    floor = config.psi_floor if floor is None else floor
    if len(traj.times) < 3:
        raise LabError("the residual needs at least three snapshots")
    steps = np.diff(traj.times)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
        raise LabError("the residual needs uniformly spaced snapshots")
    dt = steps[0]
    grid = traj.grid
    psi = traj.values[1:-1]
    dpsi_dt = (traj.values[2:] - traj.values[:-2]) / (2.0 * dt)
    potential = np.stack([_potential_values(U, t, grid) for t in traj.times[1:-1]])
    magnitude = np.abs(psi)
    mask = magnitude >= floor * magnitude.max(axis=1, keepdims=True)
    coefficient = K * (K - sigma**2) / 2.0
    residual = 1j * K * dpsi_dt + 0.5 * K * sigma**2 * grid.second_difference(psi) - potential * psi
    if coefficient != 0.0:
        safe = np.where(mask, psi, 1.0)
        residual = residual + coefficient * grid.gradient(psi) ** 2 / safe
    residual = np.where(mask, residual, 0.0)
    return NonlinearResidual(traj.times[1:-1], residual, mask, coefficient)


# --------------------------------------------------------------------------
# Wave function to diffusion
# --------------------------------------------------------------------------


def _log_derivative(values: np.ndarray, grid: SpatialGrid, floor: float) -> tuple[np.ndarray, np.ndarray]:
    magnitude = np.abs(values)
    mask = magnitude >= floor * magnitude.max(axis=-1, keepdims=True)
    safe = np.where(mask, values, 1.0)
    return np.where(mask, grid.gradient(values) / safe, 0.0), mask


def _fill_masked(table: np.ndarray, mask: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Interpolate over masked nodes; beyond the outermost valid node keep its value."""
    out = np.empty_like(table)
    for i in range(table.shape[0]):
        valid = mask[i]
        if not np.any(valid):
            raise LabError("the wave function is below the floor everywhere")
        out[i] = np.interp(x, x[valid], table[i, valid])
    return out


def _as_snapshots(psi: Union[WaveFunction, WaveTrajectory]) -> tuple[SpatialGrid, np.ndarray, np.ndarray, float, float]:
    if isinstance(psi, WaveFunction):
        return psi.grid, np.array([psi.t]), psi.values[None, :], psi.sigma, psi.K
    return psi.grid, psi.times, psi.values, psi.sigma, psi.K


def _tabulate(grid: SpatialGrid, times: np.ndarray, table: np.ndarray) -> TabulatedField:
    if len(times) == 1:
        return TabulatedField((grid.points,), table[0][:, None])
    return TabulatedField((grid.points,), table[:, :, None], times=times)


def wave_to_drift(
    psi: Union[WaveFunction, WaveTrajectory],
    sigma: Optional[float] = None,
    floor: Optional[float] = None,
) -> TabulatedField:
    """b = s^2 (Re + Im)(psi'/psi), tabulated on the grid (and snapshot times)."""
    grid, times, values, psi_sigma, K = _as_snapshots(psi)
    sigma = psi_sigma if sigma is None else sigma
    if not math.isclose(K, sigma**2):
        raise LabError(f"drift extraction requires K = sigma^2, got K={K}, sigma={sigma}")
    ratio, mask = _log_derivative(values, grid, config.psi_floor if floor is None else floor)
    drift = sigma**2 * (ratio.real + ratio.imag)
    return _tabulate(grid, times, _fill_masked(drift, mask, grid.points))


def density_fields_from_wave(
    psi: Union[WaveFunction, WaveTrajectory],
    sigma: Optional[float] = None,
    floor: Optional[float] = None,
) -> NelsonFields:
    """Nelson fields of the diffusion attached to psi: drift, score 2 Re(psi'/psi), density |psi|^2."""
    grid, times, values, psi_sigma, _ = _as_snapshots(psi)
    sigma = psi_sigma if sigma is None else sigma
    floor = config.psi_floor if floor is None else floor
    drift = wave_to_drift(psi, sigma, floor)
    ratio, mask = _log_derivative(values, grid, floor)
    score = _fill_masked(2.0 * ratio.real, mask, grid.points)
    return NelsonFields(
        drift=drift,
        score=_tabulate(grid, times, score),
        diffusion=np.array([[sigma**2]]),
        density=_tabulate(grid, times, np.abs(values) ** 2),
    )


@dataclass(frozen=True, eq=False)
class DensityMatchReport:
    t: float
    l1: float
    linf: float
    ks: float
    ks_pvalue: float
    degenerate: bool
    x: np.ndarray
    kde: np.ndarray
    psi_density: np.ndarray

    def to_dict(self) -> dict:
        return {"t": self.t, "L1": self.l1, "Linf": self.linf, "KS": self.ks, "degenerate": self.degenerate}

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        np.savetxt(
            path, np.column_stack([self.x, self.kde, self.psi_density]),
            delimiter=",", header="x,kde,psi2", comments="", fmt="%.17g",
        )
        return path


def density_match(
    e: PathEnsemble,
    psi: Union[WaveFunction, WaveTrajectory],
    t: float,
    bandwidth: Optional[float] = None,
) -> DensityMatchReport:
    """L1, Linf and Kolmogorov–Smirnov distances between the ensemble at t and |psi(t)|^2.

    The KDE is evaluated directly on the wave-function grid.
    """
    if e.dim != 1:
        raise ShapeMismatchError("density matching is one-dimensional")
    step = e.grid.index_of(t)
    wave = psi.at_time(t) if isinstance(psi, WaveTrajectory) else psi
    if not isinstance(psi, WaveTrajectory) and abs(wave.t - t) > e.grid.dt:
        logger.warning(f"Comparing the ensemble at t={t} with a wave function at t={wave.t}")
    x = wave.grid.points
    dx = wave.grid.dx
    rho = wave.density() / wave.norm()
    estimate = estimate_density(e, step, bandwidth=bandwidth, axes=[x])
    if estimate.point_mass:
        kde = np.zeros_like(rho)
        l1 = float(np.sum(rho) * dx) + 1.0
    else:
        kde = estimate.values
        l1 = float(np.sum(np.abs(kde - rho)) * dx)
    linf = float(np.max(np.abs(kde - rho)))
    cdf = np.concatenate([[0.0], np.cumsum(rho) * dx])
    cdf /= cdf[-1]
    edges = np.concatenate([[x[0] - dx / 2], x + dx / 2])
    ks = stats.kstest(e.values[:, step, 0], lambda v: np.interp(v, edges, cdf))
    report = DensityMatchReport(
        t=float(e.times[step]), l1=l1, linf=linf, ks=float(ks.statistic), ks_pvalue=float(ks.pvalue),
        degenerate=estimate.point_mass, x=x, kde=kde, psi_density=rho,
    )
    logger.info(f"Density match at t={report.t}: L1={l1:.4f}, Linf={linf:.4f}, KS={report.ks:.4f}")
    return report


# --------------------------------------------------------------------------
# Gradient-drift criterion
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GradientDriftReport:
    g_sup: float
    divergence_sup: np.ndarray
    n_points: int

    @property
    def gradient_like(self) -> bool:
        return self.g_sup == 0.0


def gradient_drift_check(
    drift: FieldExpr,
    density: FieldExpr,
    box: Sequence[tuple[float, float]],
    n_points: int = 41,
    t: float = 0.0,
) -> GradientDriftReport:
    """sup |G| and sup |div(p G_i)| on a grid, with G_ij = d_j b_i - d_i b_j."""
    d = drift.dim
    if drift.shape != (d,) or not density.is_scalar or density.dim != d or len(box) != d:
        raise ShapeMismatchError("drift, density and box must share the dimension")
    if d == 1:
        return GradientDriftReport(0.0, np.zeros(1), n_points)
    jac = jacobian_field(drift).nodes
    p = density.node
    g_nodes = [[sub(jac[i * d + j], jac[j * d + i]) for j in range(d)] for i in range(d)]
    div_nodes = []
    for i in range(d):
        total = diff_node(mul(p, g_nodes[i][0]), 0)
        for j in range(1, d):
            total = add(total, diff_node(mul(p, g_nodes[i][j]), j))
        div_nodes.append(total)
    g_field = FieldExpr(tuple(n for row in g_nodes for n in row), d, (d, d))
    div_field = FieldExpr(tuple(div_nodes), d, (d,))
    axes = [np.linspace(lo, hi, n_points) for lo, hi in box]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    g_values = eval_field(g_field, t, points)
    div_values = eval_field(div_field, t, points)
    return GradientDriftReport(
        g_sup=float(np.max(np.abs(g_values))),
        divergence_sup=np.max(np.abs(div_values), axis=0),
        n_points=n_points,
    )
