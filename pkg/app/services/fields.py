"""
Evaluable vector fields of (t, x) with first and second spatial derivatives.

Every field answers four batched queries at points ``x`` of shape ``(..., d)``:

* ``value``            -> ``(..., k)``
* ``jacobian``         -> ``(..., k, d)``, entry ``[i, j] = d_j f_i``
* ``hessian``          -> ``(..., k, d, d)``
* ``time_derivative``  -> ``(..., k)``

Nelson drifts, scores of densities, wave-function drifts and momentum fields
are all built from these pieces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from app.core.errors import FieldDomainError, LabError
from app.services.fieldexpr import (
    Call,
    FieldExpr,
    dt_field,
    eval_field,
    eval_phase_field,
    diff_node,
    velocity_is_polynomial,
)


@runtime_checkable
class VectorField(Protocol):
    dim: int
    n_components: int

    def value(self, t, x) -> np.ndarray: ...

    def jacobian(self, t, x) -> np.ndarray: ...

    def hessian(self, t, x) -> np.ndarray: ...

    def time_derivative(self, t, x) -> np.ndarray: ...


def _batch(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


class ExprVectorField:
    """Vector field defined by a :class:`FieldExpr`; derivatives are symbolic."""

    def __init__(self, expr: FieldExpr):
        if expr.is_scalar:
            expr = FieldExpr(expr.nodes, expr.dim, (1,))
        if len(expr.shape) != 1:
            raise LabError("vector field expression expected")
        self.expr = expr
        self.dim = expr.dim
        self.n_components = expr.shape[0]
        k, d = self.n_components, self.dim
        self._jacobian = FieldExpr(
            tuple(diff_node(n, j) for n in expr.nodes for j in range(d)), d, (k, d)
        )
        self._hessian = FieldExpr(
            tuple(
                diff_node(diff_node(n, i), j)
                for n in expr.nodes
                for i in range(d)
                for j in range(d)
            ),
            d,
            (k, d, d),
        )
        self._dt = dt_field(expr)

    def value(self, t, x):
        return eval_field(self.expr, t, _batch(x))

    def jacobian(self, t, x):
        return eval_field(self._jacobian, t, _batch(x))

    def hessian(self, t, x):
        return eval_field(self._hessian, t, _batch(x))

    def time_derivative(self, t, x):
        return eval_field(self._dt, t, _batch(x))


class ZeroField:
    def __init__(self, dim: int, n_components: Optional[int] = None):
        self.dim = dim
        self.n_components = dim if n_components is None else n_components

    def value(self, t, x):
        return np.zeros(_batch(x).shape[:-1] + (self.n_components,))

    def jacobian(self, t, x):
        return np.zeros(_batch(x).shape[:-1] + (self.n_components, self.dim))

    def hessian(self, t, x):
        return np.zeros(_batch(x).shape[:-1] + (self.n_components, self.dim, self.dim))

    def time_derivative(self, t, x):
        return self.value(t, x)


class ScoreField:
    """Gradient of ``log p`` for a density expression ``p``.

    Where ``p(t, x) <= floor * peak(t)`` the score and its derivatives are set
    to zero. ``peak(t)`` is the maximum of ``p(t, .)`` over a fixed reference
    set (by default a grid on ``[-span, span]^d``), so a point is masked the
    same way in every batch.
    """

    _GRID_POINTS = 4096

    def __init__(
        self,
        density: FieldExpr,
        floor: float = 1e-12,
        span: float = 10.0,
        reference: Optional[np.ndarray] = None,
    ):
        if not density.is_scalar:
            raise LabError("density must be a scalar expression")
        self.density = density
        self.floor = floor
        self.dim = density.dim
        if reference is None:
            n = max(3, int(round(self._GRID_POINTS ** (1.0 / density.dim))) | 1)
            axis = np.linspace(-span, span, n)
            reference = np.stack(np.meshgrid(*([axis] * density.dim), indexing="ij"), axis=-1)
        self.reference = np.asarray(reference, dtype=float).reshape(-1, density.dim)
        self._peaks: dict[float, float] = {}
        self.n_components = density.dim
        log_p = Call("log", density.node)
        d = self.dim
        grad = [diff_node(log_p, i) for i in range(d)]
        self._value = FieldExpr(tuple(grad), d, (d,))
        self._jacobian = FieldExpr(tuple(diff_node(g, j) for g in grad for j in range(d)), d, (d, d))
        self._hessian = FieldExpr(
            tuple(diff_node(diff_node(g, i), j) for g in grad for i in range(d) for j in range(d)),
            d,
            (d, d, d),
        )
        self._dt = FieldExpr(tuple(diff_node(g, "t") for g in grad), d, (d,))

    def _reference_density(self, t: float) -> np.ndarray:
        try:
            return eval_field(self.density, t, self.reference)
        except FieldDomainError:
            # points outside the domain of the expression carry no mass
            values = np.zeros(len(self.reference))
            for i, y in enumerate(self.reference):
                try:
                    values[i] = eval_field(self.density, t, y)
                except FieldDomainError:
                    pass
            return values

    def peak(self, t: float) -> float:
        """max p(t, .) over the reference points, cached per time."""
        t = float(t)
        if t not in self._peaks:
            self._peaks[t] = float(np.max(self._reference_density(t)))
        return self._peaks[t]

    def mask(self, t, x) -> np.ndarray:
        x = _batch(x)
        batch = x.shape[:-1]
        p = eval_field(self.density, t, x)
        times = np.broadcast_to(np.asarray(t, dtype=float), batch)
        unique, inverse = np.unique(times, return_inverse=True)
        peaks = np.array([self.peak(s) for s in unique])[inverse.reshape(-1)].reshape(batch)
        return p > self.floor * peaks

    def _masked(self, expr: FieldExpr, t, x) -> np.ndarray:
        x = _batch(x)
        batch = x.shape[:-1]
        out = np.zeros(batch + expr.shape)
        keep = self.mask(t, x)
        if np.any(keep):
            t_b = np.broadcast_to(np.asarray(t, dtype=float), batch)
            out[keep] = eval_field(expr, t_b[keep], x[keep])
        return out

    def value(self, t, x):
        return self._masked(self._value, t, x)

    def jacobian(self, t, x):
        return self._masked(self._jacobian, t, x)

    def hessian(self, t, x):
        return self._masked(self._hessian, t, x)

    def time_derivative(self, t, x):
        return self._masked(self._dt, t, x)


class TabulatedField:
    """Field sampled on a tensor grid, optionally with a leading time axis.

    Values are interpolated multilinearly. Derivatives come from
    ``numpy.gradient`` of the table and are interpolated the same way.
    Outside the grid the field either keeps its boundary value or, with
    ``strict=True``, raises.
    """

    def __init__(
        self,
        axes: Sequence[np.ndarray],
        values: np.ndarray,
        times: Optional[np.ndarray] = None,
        strict: bool = False,
    ):
        self.axes = tuple(np.asarray(a, dtype=float) for a in axes)
        self.times = None if times is None else np.asarray(times, dtype=float)
        self.dim = len(self.axes)
        self.strict = strict
        values = np.asarray(values, dtype=float)
        lead = 0 if self.times is None else 1
        expected = ((len(self.times),) if lead else ()) + tuple(len(a) for a in self.axes)
        if values.shape[: lead + self.dim] != expected:
            raise LabError(f"table shape {values.shape} does not match grid {expected}")
        if values.ndim == lead + self.dim:
            values = values[..., None]
        self.n_components = values.shape[-1]
        d = self.dim
        spatial_axes = range(lead, lead + d)

        def grad(arr: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
            if len(coords) < 2:
                return np.zeros_like(arr)
            return np.gradient(arr, coords, axis=axis, edge_order=2 if len(coords) > 2 else 1)

        jac = np.stack(
            [grad(values, ax, self.axes[j]) for j, ax in enumerate(spatial_axes)], axis=-1
        )
        hess = np.stack(
            [grad(jac, ax, self.axes[j]) for j, ax in enumerate(spatial_axes)], axis=-1
        )
        if self.times is not None and len(self.times) > 1:
            dt = grad(values, 0, self.times)
        else:
            dt = np.zeros_like(values)
        points = (((self.times,) if lead else ())) + self.axes
        if lead and len(self.times) == 1:
            points = self.axes
            values, jac, hess, dt = values[0], jac[0], hess[0], dt[0]
            self.times = None
        self._interp = {
            name: RegularGridInterpolator(points, arr, method="linear", bounds_error=False, fill_value=None)
            for name, arr in (("value", values), ("jacobian", jac), ("hessian", hess), ("dt", dt))
        }

    def _points(self, t, x) -> tuple[np.ndarray, tuple[int, ...]]:
        x = _batch(x)
        batch = x.shape[:-1]
        flat = x.reshape(-1, self.dim)
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])
        if self.strict and (np.any(flat < lo) or np.any(flat > hi)):
            raise LabError("density grid does not cover the requested region")
        flat = np.clip(flat, lo, hi)
        if self.times is not None:
            tt = np.broadcast_to(np.asarray(t, dtype=float), batch).reshape(-1, 1)
            tt = np.clip(tt, self.times[0], self.times[-1])
            flat = np.hstack([tt, flat])
        return flat, batch

    def _query(self, name: str, t, x, tail: tuple[int, ...]) -> np.ndarray:
        flat, batch = self._points(t, x)
        return self._interp[name](flat).reshape(batch + tail)

    def value(self, t, x):
        return self._query("value", t, x, (self.n_components,))

    def jacobian(self, t, x):
        return self._query("jacobian", t, x, (self.n_components, self.dim))

    def hessian(self, t, x):
        return self._query("hessian", t, x, (self.n_components, self.dim, self.dim))

    def time_derivative(self, t, x):
        return self._query("dt", t, x, (self.n_components,))


# number of trailing spatial axes after the component axis
_SPATIAL_TAIL = {"value": 0, "jacobian": 1, "hessian": 2, "time_derivative": 0}


@dataclass(frozen=True, eq=False)
class LinearCombination:
    """Sum of fields, each multiplied by a constant matrix (or scalar)."""

    terms: tuple[tuple[np.ndarray, VectorField], ...]
    dim: int = field(init=False)
    n_components: int = field(init=False)

    def __post_init__(self):
        if not self.terms:
            raise LabError("empty linear combination")
        rows = {_rows(m, f) for m, f in self.terms}
        if len(rows) != 1:
            raise LabError(f"terms disagree on the number of components: {sorted(rows)}")
        object.__setattr__(self, "dim", self.terms[0][1].dim)
        object.__setattr__(self, "n_components", rows.pop())

    def _apply(self, method: str, t, x) -> np.ndarray:
        total = None
        for matrix, fld in self.terms:
            raw = getattr(fld, method)(t, x)
            part = _left_multiply(matrix, raw, _SPATIAL_TAIL[method])
            total = part if total is None else total + part
        return total

    def value(self, t, x):
        return self._apply("value", t, x)

    def jacobian(self, t, x):
        return self._apply("jacobian", t, x)

    def hessian(self, t, x):
        return self._apply("hessian", t, x)

    def time_derivative(self, t, x):
        return self._apply("time_derivative", t, x)


def _rows(matrix, fld: VectorField) -> int:
    m = np.asarray(matrix)
    return fld.n_components if m.ndim == 0 else m.shape[0]


def _left_multiply(matrix, raw: np.ndarray, spatial_tail: int) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    if m.ndim == 0:
        return float(m) * raw
    axis = raw.ndim - 1 - spatial_tail
    out = np.moveaxis(raw, axis, -1) @ m.T
    return np.moveaxis(out, -1, axis)


def combine(*terms: tuple[object, VectorField]) -> LinearCombination:
    return LinearCombination(tuple((np.asarray(m, dtype=float), f) for m, f in terms))


class TimeReversedField:
    """``sign * f(t_total - t, x)``."""

    def __init__(self, base: VectorField, t_total: float, sign: float = 1.0):
        self.base = base
        self.t_total = t_total
        self.sign = sign
        self.dim = base.dim
        self.n_components = base.n_components

    def _t(self, t):
        return self.t_total - np.asarray(t, dtype=float)

    def value(self, t, x):
        return self.sign * self.base.value(self._t(t), x)

    def jacobian(self, t, x):
        return self.sign * self.base.jacobian(self._t(t), x)

    def hessian(self, t, x):
        return self.sign * self.base.hessian(self._t(t), x)

    def time_derivative(self, t, x):
        return -self.sign * self.base.time_derivative(self._t(t), x)


@dataclass(frozen=True)
class ComplexVectorField:
    """A complex field ``re + i*im`` built from two real fields."""

    re: VectorField
    im: VectorField

    @property
    def dim(self) -> int:
        return self.re.dim

    @property
    def n_components(self) -> int:
        return self.re.n_components

    def value(self, t, x):
        return self.re.value(t, x) + 1j * self.im.value(t, x)

    def jacobian(self, t, x):
        return self.re.jacobian(t, x) + 1j * self.im.jacobian(t, x)

    def hessian(self, t, x):
        return self.re.hessian(t, x) + 1j * self.im.hessian(t, x)

    def time_derivative(self, t, x):
        return self.re.time_derivative(t, x) + 1j * self.im.time_derivative(t, x)

    def map(self, matrix) -> "ComplexVectorField":
        """Left-multiply both parts by a constant real matrix."""
        return ComplexVectorField(combine((matrix, self.re)), combine((matrix, self.im)))


class PhaseComposition:
    """The field ``f(t, x, g(t, x))`` for a phase-space expression ``f`` of
    (t, x, v) and a (complex) velocity field ``g``; derivatives by the chain rule.
    """

    def __init__(self, expr: FieldExpr, inner: VectorField):
        if expr.is_scalar:
            expr = FieldExpr(expr.nodes, expr.dim, (1,))
        d = inner.dim
        if len(expr.shape) != 1 or expr.dim != 2 * d or inner.n_components != d:
            raise LabError(f"phase-space field of dimension {2 * d} and a {d}-vector velocity field expected")
        if not velocity_is_polynomial(expr):
            raise LabError("velocities must enter the phase-space field polynomially")
        self.expr = expr
        self.inner = inner
        self.dim = d
        self.n_components = k = expr.shape[0]
        n = 2 * d
        self._first = FieldExpr(tuple(diff_node(e, j) for e in expr.nodes for j in range(n)), n, (k, n))
        self._second = FieldExpr(
            tuple(diff_node(diff_node(e, i), j) for e in expr.nodes for i in range(n) for j in range(n)),
            n,
            (k, n, n),
        )
        self._dt = dt_field(expr)

    def _at(self, field: FieldExpr, t, x) -> np.ndarray:
        x = _batch(x)
        return eval_phase_field(field, t, x, self.inner.value(t, x))

    def value(self, t, x):
        return self._at(self.expr, t, x)

    def jacobian(self, t, x):
        d = self.dim
        first = self._at(self._first, t, x)
        return first[..., :d] + np.einsum("...kl,...lj->...kj", first[..., d:], self.inner.jacobian(t, x))

    def hessian(self, t, x):
        d = self.dim
        first = self._at(self._first, t, x)
        second = self._at(self._second, t, x)
        jg = self.inner.jacobian(t, x)
        return (
            second[..., :d, :d]
            + np.einsum("...kil,...lj->...kij", second[..., :d, d:], jg)
            + np.einsum("...klj,...li->...kij", second[..., d:, :d], jg)
            + np.einsum("...klm,...li,...mj->...kij", second[..., d:, d:], jg, jg)
            + np.einsum("...kl,...lij->...kij", first[..., d:], self.inner.hessian(t, x))
        )

    def time_derivative(self, t, x):
        d = self.dim
        first = self._at(self._first, t, x)
        return self._at(self._dt, t, x) + np.einsum("...kl,...l->...k", first[..., d:], self.inner.time_derivative(t, x))


def as_field(source) -> VectorField:
    if isinstance(source, FieldExpr):
        return ExprVectorField(source)
    if isinstance(source, VectorField):
        return source
    raise LabError(f"cannot use {type(source).__name__} as a vector field")
