"""
Lagrangians along complex stochastic velocities: Euler–Lagrange residuals, the
action functional, its first variation, and first integrals from one-parameter
symmetry groups.

Natural Lagrangians L(x, v) = v.Mv/2 - U(x) are the built-in kind. Any other
admissible L(t, x, v) can be given as an expression polynomial in v.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.integrate import trapezoid

from app.core.errors import LabError, ShapeMismatchError
from app.services.fieldexpr import (
    FieldExpr,
    dt_field,
    eval_field,
    eval_phase_field,
    grad_field,
    is_constant,
    jacobian_field,
    parse_phase_field,
    velocity_is_polynomial,
)
from app.services.fields import PhaseComposition, VectorField
from app.services.nelson import (
    ComplexProcessSample,
    NelsonFields,
    SampleKind,
    derivative_of_field,
    second_derivative,
)
from app.services.resampling import BootstrapSummary, bootstrap_mean, bootstrap_mean_series
from app.services.sde import PathEnsemble

logger = logging.getLogger(__name__)

# absolute slack for integrands that vanish up to rounding
_ROUNDING_ATOL = 1e-10


@dataclass(frozen=True, eq=False)
class LagrangianSpec:
    potential: FieldExpr
    mass: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.potential.is_scalar:
            raise LabError("potential must be a scalar field")
        d = self.potential.dim
        mass = np.eye(d) if self.mass is None else np.asarray(self.mass, dtype=float)
        if mass.ndim == 0:
            mass = mass * np.eye(d)
        elif mass.ndim == 1:
            mass = np.diag(mass)
        if mass.shape != (d, d) or not np.allclose(mass, mass.T):
            raise LabError(f"mass matrix must be a symmetric {d}x{d} matrix")
        try:
            np.linalg.cholesky(mass)
        except np.linalg.LinAlgError as err:
            raise LabError("mass matrix must be positive definite") from err
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "_grad", grad_field(self.potential))

    @property
    def dim(self) -> int:
        return self.potential.dim

    @property
    def grad_potential_expr(self) -> FieldExpr:
        return self._grad

    def kinetic(self, v: np.ndarray) -> np.ndarray:
        """v.Mv/2, extended to complex v without conjugation."""
        return 0.5 * np.einsum("...i,ij,...j->...", v, self.mass, v)

    def potential_value(self, t, x) -> np.ndarray:
        return eval_field(self.potential, t, x)

    def grad_potential(self, t, x) -> np.ndarray:
        return eval_field(self._grad, t, x)

    def evaluate(self, t, x, v) -> np.ndarray:
        return self.kinetic(v) - self.potential_value(t, x)

    def momentum(self, v: np.ndarray) -> np.ndarray:
        return v @ self.mass.T

    def momentum_at(self, t, x, v) -> np.ndarray:
        return self.momentum(v)

    def scaled(self, factor: float) -> "LagrangianSpec":
        return LagrangianSpec(self.potential * factor, self.mass * factor)


@dataclass(frozen=True, eq=False)
class ExpressionLagrangian:
    """An admissible Lagrangian L(t, x, v) written in ``x1..xd`` and ``v1..vd``.

    The velocities must enter polynomially, which makes L holomorphic in v;
    it is evaluated at complex v through that polynomial.
    """

    expr: FieldExpr
    text: str = ""

    def __post_init__(self):
        if not self.expr.is_scalar or self.expr.dim % 2:
            raise LabError("Lagrangian must be a scalar field of (t, x, v)")
        if not velocity_is_polynomial(self.expr):
            raise LabError("Lagrangian must be polynomial in the velocities v1..vd")
        d = self.dim
        grad = grad_field(self.expr)
        object.__setattr__(self, "_grad_x", FieldExpr(grad.nodes[:d], self.expr.dim, (d,)))
        object.__setattr__(self, "_grad_v", FieldExpr(grad.nodes[d:], self.expr.dim, (d,)))

    @classmethod
    def parse(cls, text: str, dim: int) -> "ExpressionLagrangian":
        return cls(parse_phase_field(text, dim), text)

    @property
    def dim(self) -> int:
        return self.expr.dim // 2

    def evaluate(self, t, x, v) -> np.ndarray:
        return eval_phase_field(self.expr, t, x, v)

    def grad_x(self, t, x, v) -> np.ndarray:
        return eval_phase_field(self._grad_x, t, x, v)

    def momentum_at(self, t, x, v) -> np.ndarray:
        """dL/dv at (t, x, v)."""
        return eval_phase_field(self._grad_v, t, x, v)

    def momentum_field(self, velocity: VectorField) -> PhaseComposition:
        """(t, x) -> dL/dv(t, x, g(t, x)) for the velocity field g."""
        return PhaseComposition(self._grad_v, velocity)

    def scaled(self, factor: float) -> "ExpressionLagrangian":
        return ExpressionLagrangian(self.expr * factor, f"{factor!r}*({self.text})")


Lagrangian = Union[LagrangianSpec, ExpressionLagrangian]


def el_residual(
    e: PathEnsemble,
    L: Lagrangian,
    nf: NelsonFields,
    mu: int = 1,
    steps: Optional[Sequence[int]] = None,
) -> ComplexProcessSample:
    """D_mu (dL/dv) - dL/dx along (X, D_mu X), per path.

    For a natural Lagrangian this is M D_mu^2 X + grad U(X).
    """
    if L.dim != e.dim:
        raise ShapeMismatchError(f"Lagrangian has {L.dim} coordinates, ensemble has {e.dim}")
    if isinstance(L, ExpressionLagrangian):
        return _expression_el_residual(e, L, nf, mu, steps)
    acc = second_derivative(e, nf, mu, steps)
    values = acc.values @ L.mass.T
    for j, s in enumerate(acc.steps):
        values[:, j, :] += L.grad_potential(e.times[s], e.values[:, s, :])
    return ComplexProcessSample(e.grid, acc.steps, values, SampleKind.RESIDUAL, mu)


def _expression_el_residual(
    e: PathEnsemble,
    L: ExpressionLagrangian,
    nf: NelsonFields,
    mu: int,
    steps: Optional[Sequence[int]],
) -> ComplexProcessSample:
    momentum = L.momentum_field(nf.stochastic_field(mu))
    dP = derivative_of_field(momentum, e, nf, mu, steps, SampleKind.RESIDUAL)
    values = dP.values.copy()
    for j, s in enumerate(dP.steps):
        t, x = e.times[s], e.values[:, s, :]
        values[:, j, :] -= L.grad_x(t, x, nf.stochastic_value(t, x, mu))
    return ComplexProcessSample(e.grid, dP.steps, values, SampleKind.RESIDUAL, mu)


@dataclass(frozen=True, eq=False)
class ResidualSummary:
    """Mean residual per time and component, with bootstrap standard errors of both parts."""

    times: np.ndarray
    mean: np.ndarray
    se_real: np.ndarray
    se_imag: np.ndarray

    def within(self, n_se: float = 3.0, atol: float = 0.0) -> bool:
        ok_re = np.abs(self.mean.real) <= n_se * self.se_real + atol
        ok_im = np.abs(self.mean.imag) <= n_se * self.se_imag + atol
        return bool(np.all(ok_re & ok_im))

    @property
    def max_abs_mean(self) -> float:
        return float(np.max(np.abs(self.mean))) if self.mean.size else 0.0

    @property
    def max_se(self) -> float:
        return float(np.max(np.hypot(self.se_real, self.se_imag))) if self.mean.size else 0.0


def summarize_residual(
    residual: ComplexProcessSample, seed: int = 0, n_resamples: Optional[int] = None
) -> ResidualSummary:
    n, s, k = residual.values.shape
    flat = residual.values.reshape(n, s * k)
    re = bootstrap_mean_series(flat.real, seed, n_resamples)
    im = bootstrap_mean_series(flat.imag, seed + 1, n_resamples)
    return ResidualSummary(
        residual.times,
        (re.mean + 1j * im.mean).reshape(s, k),
        re.se.reshape(s, k),
        im.se.reshape(s, k),
    )


def _lagrangian_along(e: PathEnsemble, L: Lagrangian, dX: ComplexProcessSample, part: str = "full") -> np.ndarray:
    """L(X, D X) per path and sample time, shape ``N x S``."""
    out = np.empty(dX.values.shape[:2], dtype=complex)
    for j, s in enumerate(dX.steps):
        t, x, v = e.times[s], e.values[:, s, :], dX.values[:, j, :]
        if part == "kinetic":
            out[:, j] = L.kinetic(v)
        elif part == "potential":
            out[:, j] = L.potential_value(t, x)
        else:
            out[:, j] = L.evaluate(t, x, v)
    return out


def action_functional(e: PathEnsemble, L: Lagrangian, dX: ComplexProcessSample) -> complex:
    """E[int L(X, D_mu X) dt] by the trapezoidal rule over the sample times."""
    if dX.n_paths != e.n_paths or dX.grid != e.grid:
        raise ShapeMismatchError("derivative sample does not belong to this ensemble")
    values = _lagrangian_along(e, L, dX).mean(axis=0)
    return complex(trapezoid(values, dX.times))


def action_parts(e: PathEnsemble, L: LagrangianSpec, dX: ComplexProcessSample) -> tuple[complex, complex]:
    """(kinetic action, potential action); the action is their difference."""
    if not isinstance(L, LagrangianSpec):
        raise LabError("kinetic and potential parts need a natural Lagrangian")
    kinetic = _lagrangian_along(e, L, dX, "kinetic").mean(axis=0)
    potential = _lagrangian_along(e, L, dX, "potential").mean(axis=0)
    return complex(trapezoid(kinetic, dX.times)), complex(trapezoid(potential, dX.times))


# --------------------------------------------------------------------------
# First variation
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StationarityReport:
    epsilons: np.ndarray
    delta_action: np.ndarray
    c1: complex
    c2: complex
    c1_real: BootstrapSummary
    c1_imag: BootstrapSummary

    @property
    def c1_se(self) -> float:
        return float(np.hypot(self.c1_real.se, self.c1_imag.se))

    @property
    def ratio(self) -> float:
        """|c1| in units of its standard error."""
        if self.c1_se == 0.0:
            return 0.0 if self.c1 == 0 else float("inf")
        return abs(self.c1) / self.c1_se

    def stationary(self, n_se: float = 3.0, atol: float = 0.0) -> bool:
        return abs(self.c1) <= n_se * self.c1_se + atol


def _check_variation(Z: FieldExpr, e: PathEnsemble) -> None:
    if Z.shape != (e.dim,):
        raise ShapeMismatchError(f"variation must be a {e.dim}-vector field")
    jac = jacobian_field(Z)
    if not (is_constant(jac) and not np.any(eval_field(jac, 0.0, np.zeros(e.dim)))):
        raise LabError("variation must be a deterministic function of t only")
    origin = np.zeros(e.dim)
    for t in (e.grid.t0, e.grid.t1):
        if np.max(np.abs(eval_field(Z, t, origin))) > 1e-9:
            raise LabError(f"variation must vanish at the endpoints, Z({t}) != 0")


def stationarity_check(
    e: PathEnsemble,
    L: Lagrangian,
    dX: ComplexProcessSample,
    variation: FieldExpr,
    epsilons: Sequence[float],
    seed: int = 0,
    n_resamples: Optional[int] = None,
) -> StationarityReport:
    """Fit J(X + eps Z) - J(X) = c1 eps + c2 eps^2 path by path.

    A deterministic variation gives D(X + eps Z) = D X + eps dZ/dt, so no
    derivative is re-estimated. The reported c1 is the path mean of the
    per-path first-order coefficients, bootstrapped for its standard error.
    """
    _check_variation(variation, e)
    eps = np.asarray(epsilons, dtype=float)
    if len(eps) < 2 or np.any(eps == 0):
        raise LabError("stationarity check needs at least two nonzero epsilons")

    z_dot = dt_field(variation)
    origin = np.zeros(e.dim)
    times = dX.times
    z = np.stack([eval_field(variation, t, origin) for t in times])
    zd = np.stack([eval_field(z_dot, t, origin) for t in times])
    base = _lagrangian_along(e, L, dX)
    deltas = np.empty((len(eps), e.n_paths), dtype=complex)
    for i, epsilon in enumerate(eps):
        shifted = np.empty_like(base)
        for j, s in enumerate(dX.steps):
            x = e.values[:, s, :] + epsilon * z[j]
            v = dX.values[:, j, :] + epsilon * zd[j]
            shifted[:, j] = L.evaluate(times[j], x, v)
        deltas[i] = trapezoid(shifted - base, times, axis=1)
    design = np.column_stack([eps, eps**2])
    coefficients = np.linalg.pinv(design) @ deltas
    c1_paths, c2_paths = coefficients
    c1_real = bootstrap_mean(c1_paths.real, seed, n_resamples)
    c1_imag = bootstrap_mean(c1_paths.imag, seed + 1, n_resamples)
    report = StationarityReport(
        epsilons=eps,
        delta_action=deltas.mean(axis=1),
        c1=complex(c1_paths.mean()),
        c2=complex(c2_paths.mean()),
        c1_real=c1_real,
        c1_imag=c1_imag,
    )
    logger.info(f"First variation c1={report.c1:.4g} (se {report.c1_se:.3g}, ratio {report.ratio:.2f})")
    return report


# --------------------------------------------------------------------------
# Noether first integrals
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SymmetryGroupSpec:
    """Translations along ``direction`` or rotations in the coordinate ``plane`` (i, j)."""

    kind: str
    direction: Optional[np.ndarray] = None
    plane: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.kind == "translation":
            if self.direction is None:
                raise LabError("translation needs a direction")
            object.__setattr__(self, "direction", np.asarray(self.direction, dtype=float))
        elif self.kind == "rotation":
            if self.plane is None or len(self.plane) != 2 or self.plane[0] == self.plane[1]:
                raise LabError("rotation needs a plane of two distinct coordinates")
            object.__setattr__(self, "plane", (int(self.plane[0]), int(self.plane[1])))
        else:
            raise LabError(f"unknown symmetry kind {self.kind!r}")

    @classmethod
    def translation(cls, direction: Sequence[float]) -> "SymmetryGroupSpec":
        return cls("translation", direction=np.asarray(direction, dtype=float))

    @classmethod
    def rotation_about_axis(cls, axis: int) -> "SymmetryGroupSpec":
        """Rotations of R^3 about coordinate ``axis``; the generator is e_axis x X."""
        return cls("rotation", plane=((axis + 1) % 3, (axis + 2) % 3))

    @property
    def label(self) -> str:
        if self.kind == "translation":
            return f"translation{self.direction.tolist()}"
        i, j = self.plane
        return f"rotation(x{i + 1},x{j + 1})"

    def matrix(self, d: int) -> np.ndarray:
        """The generator as a linear map (zero for translations)."""
        g = np.zeros((d, d))
        if self.kind == "rotation":
            i, j = self.plane
            g[i, j], g[j, i] = -1.0, 1.0
        return g

    def generator(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "translation":
            if self.direction.shape != (x.shape[-1],):
                raise ShapeMismatchError("translation direction does not match the dimension")
            return np.broadcast_to(self.direction, x.shape)
        i, j = self.plane
        if max(i, j) >= x.shape[-1]:
            raise ShapeMismatchError(f"rotation plane {self.plane} outside dimension {x.shape[-1]}")
        out = np.zeros_like(x)
        out[..., i] = -x[..., j]
        out[..., j] = x[..., i]
        return out


def invariance_violation(
    L: Lagrangian,
    g: SymmetryGroupSpec,
    e: PathEnsemble,
    steps: Sequence[int],
    dX: Optional[ComplexProcessSample] = None,
) -> float:
    """sup |grad U . gen| over visited states plus the mass-matrix commutator norm.

    For an expression Lagrangian it is sup |dL/dx . gen(x) + dL/dv . G v| over the
    visited (X, D_mu X), where G is the linear part of the generator; ``dX``
    supplies the velocities and fixes the steps.
    """
    if isinstance(L, ExpressionLagrangian):
        if dX is None:
            raise LabError("invariance of an expression Lagrangian needs the velocity sample")
        gm = g.matrix(L.dim)
        worst = 0.0
        for j, s in enumerate(dX.steps):
            t, x, v = e.times[s], e.values[:, s, :], dX.values[:, j, :]
            rate = np.sum(L.grad_x(t, x, v) * g.generator(x), axis=1)
            rate += np.sum(L.momentum_at(t, x, v) * (v @ gm.T), axis=1)
            worst = max(worst, float(np.max(np.abs(rate))))
        return worst
    worst = 0.0
    for s in steps:
        x = e.values[:, s, :]
        worst = max(worst, float(np.max(np.abs(np.sum(L.grad_potential(e.times[s], x) * g.generator(x), axis=1)))))
    gm = g.matrix(L.dim)
    return worst + float(np.max(np.abs(L.mass @ gm - gm @ L.mass)))


@dataclass(frozen=True, eq=False)
class ConservationReport:
    symmetry: str
    times: np.ndarray
    integral: np.ndarray
    se: np.ndarray
    slope_real: BootstrapSummary
    slope_imag: BootstrapSummary
    max_deviation: float
    scale: float
    tolerance: float
    slope_atol: float = 0.0
    invariance_violation: float = 0.0
    angular_momentum: dict[str, complex] = field(default_factory=dict)

    @property
    def slope_contains_zero(self) -> bool:
        def contains(b: BootstrapSummary) -> bool:
            slack = self.slope_atol + _ROUNDING_ATOL
            return b.ci_low - slack <= 0.0 <= b.ci_high + slack

        return contains(self.slope_real) and contains(self.slope_imag)

    @property
    def conserved(self) -> bool:
        return self.slope_contains_zero and self.max_deviation <= self.tolerance * self.scale + _ROUNDING_ATOL

    def to_dict(self) -> dict:
        return {
            "symmetry": self.symmetry,
            "integral": [
                [float(t), float(v.real), float(v.imag), float(s)]
                for t, v, s in zip(self.times, self.integral, self.se)
            ],
            "slope": {"real": self.slope_real.as_dict(), "imag": self.slope_imag.as_dict()},
            "max_deviation": self.max_deviation,
            "scale": self.scale,
            "invariance_violation": self.invariance_violation,
            "angular_momentum": {k: [v.real, v.imag] for k, v in self.angular_momentum.items()},
            "verdict": "conserved" if self.conserved else "not conserved",
        }


def _rotation_planes(d: int) -> list[tuple[int, int]]:
    if d == 3:
        return [(1, 2), (2, 0), (0, 1)]
    return [(i, j) for i in range(d) for j in range(i + 1, d)]


def noether_integral(
    e: PathEnsemble,
    L: Lagrangian,
    g: SymmetryGroupSpec,
    dX: ComplexProcessSample,
    seed: int = 0,
    tolerance: float = 0.05,
    slope_atol: float = 0.0,
    n_resamples: Optional[int] = None,
) -> ConservationReport:
    """Monitor I(t) = E[dL/dv(X, D_mu X) . gen(X)] and decide whether it is conserved.

    The drift slope is the mean of per-path least-squares slopes; the
    deviation max |I(t) - I(t0)| is compared with ``tolerance`` times the RMS
    of the per-path integrand.
    """
    if L.dim != e.dim or dX.n_paths != e.n_paths:
        raise ShapeMismatchError("Lagrangian, ensemble and derivative sample disagree")
    steps = dX.steps
    violation = invariance_violation(L, g, e, steps, dX)
    if violation > 1e-8:
        logger.warning(f"Lagrangian is not invariant under {g.label} (violation {violation:.3g})")
    x = e.values[:, steps, :]
    momentum = np.stack(
        [L.momentum_at(e.times[s], e.values[:, s, :], dX.values[:, j, :]) for j, s in enumerate(steps)], axis=1
    )
    z = np.sum(momentum * g.generator(x), axis=2)
    re = bootstrap_mean_series(z.real, seed, n_resamples)
    im = bootstrap_mean_series(z.imag, seed + 1, n_resamples)
    integral = re.mean + 1j * im.mean
    times = dX.times
    centred = times - times.mean()
    weights = centred / np.sum(centred**2)
    per_path_slope = z @ weights
    slope_real = bootstrap_mean(per_path_slope.real, seed + 2, n_resamples)
    slope_imag = bootstrap_mean(per_path_slope.imag, seed + 3, n_resamples)
    angular = {}
    if g.kind == "rotation":
        for i, j in _rotation_planes(e.dim):
            value = x[..., i] * dX.values[..., j] - x[..., j] * dX.values[..., i]
            angular[f"x{i + 1}^x{j + 1}"] = complex(value.mean())
    report = ConservationReport(
        symmetry=g.label,
        times=times,
        integral=integral,
        se=np.hypot(re.se, im.se),
        slope_real=slope_real,
        slope_imag=slope_imag,
        max_deviation=float(np.max(np.abs(integral - integral[0]))),
        scale=float(np.sqrt(np.mean(np.abs(z) ** 2))),
        tolerance=tolerance,
        slope_atol=slope_atol,
        invariance_violation=violation,
        angular_momentum=angular,
    )
    logger.info(f"Noether integral for {g.label}: {'conserved' if report.conserved else 'not conserved'}")
    return report
