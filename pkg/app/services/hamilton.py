"""
Momentum process P = M D_mu X, the Hamiltonian H(p, x) = p.M^-1 p / 2 + U(x)
of a natural Lagrangian, and residuals of the stochastic Hamilton equations

    D_mu X = dH/dp,    D_mu P = -dH/dx.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from app.core.errors import ShapeMismatchError
from app.services.lagrange import LagrangianSpec
from app.services.nelson import (
    ComplexProcessSample,
    NelsonFields,
    SampleKind,
    SeriesReport,
    derivative_of_field,
)
from app.services.resampling import BootstrapSummary, bootstrap_mean, bootstrap_mean_series
from app.services.sde import PathEnsemble

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class HamiltonianSpec:
    lagrangian: LagrangianSpec

    def __post_init__(self):
        object.__setattr__(self, "_inverse_mass", np.linalg.inv(self.lagrangian.mass))

    @property
    def dim(self) -> int:
        return self.lagrangian.dim

    @property
    def mass(self) -> np.ndarray:
        return self.lagrangian.mass

    @property
    def inverse_mass(self) -> np.ndarray:
        return self._inverse_mass

    def velocity(self, p: np.ndarray) -> np.ndarray:
        """The Legendre map v = M^-1 p."""
        return p @ self._inverse_mass.T

    def evaluate(self, p: np.ndarray, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        """p.M^-1 p / 2 + U(x); complex p without conjugation."""
        kinetic = 0.5 * np.einsum("...i,ij,...j->...", p, self._inverse_mass, p)
        return kinetic + self.lagrangian.potential_value(t, x)

    def grad_p(self, p: np.ndarray) -> np.ndarray:
        return self.velocity(p)

    def grad_x(self, t, x) -> np.ndarray:
        return self.lagrangian.grad_potential(t, x)


def _check_dims(e: PathEnsemble, dim: int) -> None:
    if dim != e.dim:
        raise ShapeMismatchError(f"Hamiltonian has {dim} coordinates, ensemble has {e.dim}")


def momentum_process(
    e: PathEnsemble,
    L: LagrangianSpec,
    nf: NelsonFields,
    mu: int = 1,
    steps: Optional[Sequence[int]] = None,
    dX: Optional[ComplexProcessSample] = None,
) -> ComplexProcessSample:
    """P(t) = dL/dv(X, D_mu X) = M D_mu X per path.

    ``dX`` may be supplied (e.g. from estimators); otherwise it is evaluated
    from the Nelson fields.
    """
    _check_dims(e, L.dim)
    dX = nf.sample(e, mu, steps) if dX is None else dX
    return ComplexProcessSample(e.grid, dX.steps, L.momentum(dX.values), SampleKind.MOMENTUM, dX.mu)


@dataclass(frozen=True)
class LegendreReport:
    max_deviation: float
    scale: float

    @property
    def coherent(self) -> bool:
        return self.max_deviation <= 1e-12 * max(self.scale, 1.0)


def legendre_check(
    e: PathEnsemble,
    L: LagrangianSpec,
    nf: NelsonFields,
    mu: int = 1,
    P: Optional[ComplexProcessSample] = None,
    steps: Optional[Sequence[int]] = None,
) -> LegendreReport:
    """max |D_mu X - M^-1 P| over paths, times and components."""
    dX = nf.sample(e, mu, steps if P is None else P.steps)
    P = momentum_process(e, L, nf, mu, dX=dX) if P is None else P
    if not dX.same_layout(P):
        raise ShapeMismatchError("momentum sample does not match the derivative sample")
    H = HamiltonianSpec(L)
    deviation = float(np.max(np.abs(dX.values - H.velocity(P.values))))
    report = LegendreReport(deviation, float(np.max(np.abs(dX.values))))
    if not report.coherent:
        logger.warning(f"Legendre map violated: max deviation {deviation:.3g}")
    return report


def hamilton_residuals(
    e: PathEnsemble,
    H: HamiltonianSpec,
    nf: NelsonFields,
    mu: int = 1,
    steps: Optional[Sequence[int]] = None,
) -> tuple[ComplexProcessSample, ComplexProcessSample]:
    """(D_mu X - dH/dp(P), D_mu P + dH/dx(X)).

    P is the field M g(t, x) along a Markov ensemble, so D_mu P is computed by
    composing D_mu with that field.
    """
    _check_dims(e, H.dim)
    dX = nf.sample(e, mu, steps)
    P = momentum_process(e, H.lagrangian, nf, mu, dX=dX)
    first = dX.values - H.grad_p(P.values)
    dP = derivative_of_field(nf.stochastic_field(mu).map(H.mass), e, nf, mu, dX.steps, SampleKind.SECOND)
    second = dP.values.copy()
    for j, s in enumerate(dX.steps):
        second[:, j, :] += H.grad_x(e.times[s], e.values[:, s, :])
    return (
        ComplexProcessSample(e.grid, dX.steps, first, SampleKind.RESIDUAL, mu),
        ComplexProcessSample(e.grid, dX.steps, second, SampleKind.RESIDUAL, mu),
    )


def hamiltonian_identity_gap(e: PathEnsemble, H: HamiltonianSpec, dX: ComplexProcessSample) -> float:
    """max |H(P, X) - (P.D X - L(X, D X))| with P = M D X; zero up to rounding."""
    _check_dims(e, H.dim)
    L = H.lagrangian
    worst = 0.0
    for j, s in enumerate(dX.steps):
        t, x, v = e.times[s], e.values[:, s, :], dX.values[:, j, :]
        p = L.momentum(v)
        gap = H.evaluate(p, x, t) - (np.sum(p * v, axis=-1) - L.evaluate(t, x, v))
        worst = max(worst, float(np.max(np.abs(gap))))
    return worst


@dataclass(frozen=True, eq=False)
class EnergyDriftReport(SeriesReport):
    slope: Optional[BootstrapSummary] = None

    @property
    def constant(self) -> bool:
        # energies that vanish identically still carry rounding noise
        return self.slope is not None and self.slope.ci_low - 1e-10 <= 0.0 <= self.slope.ci_high + 1e-10


def energy_drift(
    e: PathEnsemble,
    H: HamiltonianSpec,
    nf: NelsonFields,
    mu: int = 1,
    steps: Optional[Sequence[int]] = None,
    seed: int = 0,
    n_resamples: Optional[int] = None,
) -> EnergyDriftReport:
    """E[Re H(P(t), X(t))] per time with the bootstrap CI of its drift slope."""
    P = momentum_process(e, H.lagrangian, nf, mu, steps)
    energy = np.stack(
        [H.evaluate(P.values[:, j, :], e.values[:, s, :], e.times[s]).real for j, s in enumerate(P.steps)],
        axis=1,
    )
    series = bootstrap_mean_series(energy, seed, n_resamples)
    times = P.times
    centred = times - times.mean()
    slope = bootstrap_mean(energy @ (centred / np.sum(centred**2)), seed + 1, n_resamples)
    report = EnergyDriftReport(times, series.mean, series.se, slope)
    logger.info(f"Energy drift slope {slope.estimate:.4g} (CI [{slope.ci_low:.4g}, {slope.ci_high:.4g}])")
    return report
