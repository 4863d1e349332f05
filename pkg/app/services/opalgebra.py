"""
Formal polynomials in the non-commuting letters D and D_*, the reversibility
involution R, and embedded differential operators acting on ensembles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from app.core.errors import LabError, ShapeMismatchError
from app.services.fieldexpr import FieldExpr, eval_field, is_constant, jacobian_field, dt_field
from app.services.nelson import (
    ComplexProcessSample,
    NelsonFields,
    SampleKind,
    derivative_of_function,
    second_derivative,
)
from app.services.resampling import BootstrapSummary, bootstrap_mean
from app.services.sde import PathEnsemble, time_reverse

logger = logging.getLogger(__name__)

D = "D"
D_STAR = "D*"
LETTERS = (D, D_STAR)
_DISPLAY = {D: "D", D_STAR: "D_*"}
_REVERSED = {D: D_STAR, D_STAR: D}

Word = tuple[str, ...]


def _word_key(word: Word) -> tuple:
    return (len(word), tuple(LETTERS.index(letter) for letter in word))


def _format_coefficient(c: complex) -> str:
    re, im = c.real, c.imag
    if im == 0:
        return f"{re:g}"
    if re == 0:
        return f"{im:g}i"
    return f"({re:g}{im:+g}i)"


@dataclass(frozen=True)
class OperatorWordPoly:
    """A finite C-linear combination of words over {D, D_*}.

    ``terms`` is kept in canonical order (by word length, then lexicographically
    with D before D_*) and never holds a zero coefficient.
    """

    terms: tuple[tuple[Word, complex], ...] = ()

    @classmethod
    def from_dict(cls, mapping: Mapping[Word, complex]) -> "OperatorWordPoly":
        cleaned = {}
        for word, coef in mapping.items():
            word = tuple(word)
            if any(letter not in LETTERS for letter in word):
                raise LabError(f"unknown letter in word {word}")
            coef = complex(coef)
            if coef != 0:
                cleaned[word] = coef
        return cls(tuple(sorted(cleaned.items(), key=lambda item: _word_key(item[0]))))

    @classmethod
    def identity(cls) -> "OperatorWordPoly":
        return cls.from_dict({(): 1})

    @classmethod
    def letter(cls, name: str) -> "OperatorWordPoly":
        return cls.from_dict({(name,): 1})

    def as_dict(self) -> dict[Word, complex]:
        return dict(self.terms)

    def coefficient(self, word: Sequence[str]) -> complex:
        return self.as_dict().get(tuple(word), 0j)

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def degree(self) -> int:
        return max((len(w) for w, _ in self.terms), default=0)

    def __add__(self, other: "OperatorWordPoly") -> "OperatorWordPoly":
        out = self.as_dict()
        for word, coef in other.terms:
            out[word] = out.get(word, 0j) + coef
        return OperatorWordPoly.from_dict(out)

    def __neg__(self) -> "OperatorWordPoly":
        return OperatorWordPoly.from_dict({w: -c for w, c in self.terms})

    def __sub__(self, other: "OperatorWordPoly") -> "OperatorWordPoly":
        return self + (-other)

    def __mul__(self, other) -> "OperatorWordPoly":
        """Composition (word concatenation) or scalar multiplication."""
        if isinstance(other, (int, float, complex)):
            return OperatorWordPoly.from_dict({w: c * other for w, c in self.terms})
        out: dict[Word, complex] = {}
        for w1, c1 in self.terms:
            for w2, c2 in other.terms:
                out[w1 + w2] = out.get(w1 + w2, 0j) + c1 * c2
        return OperatorWordPoly.from_dict(out)

    def __rmul__(self, scalar) -> "OperatorWordPoly":
        return self * scalar

    def __pow__(self, n: int) -> "OperatorWordPoly":
        if n < 0:
            raise LabError("negative powers are not defined")
        out = OperatorWordPoly.identity()
        for _ in range(n):
            out = out * self
        return out

    def conjugate(self) -> "OperatorWordPoly":
        return OperatorWordPoly.from_dict({w: c.conjugate() for w, c in self.terms})

    def __str__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for word, coef in self.terms:
            text = "·".join(_DISPLAY[letter] for letter in word)
            if not word:
                parts.append(_format_coefficient(coef))
            elif coef == 1:
                parts.append(text)
            elif coef == -1:
                parts.append(f"-{text}")
            else:
                parts.append(f"{_format_coefficient(coef)}·{text}")
        return " + ".join(parts).replace("+ -", "- ")


def build_Dmu(mu: int) -> OperatorWordPoly:
    """(D + D_*)/2 + i mu (D - D_*)/2."""
    if mu not in (-1, 0, 1):
        raise LabError(f"mu must be -1, 0 or 1, got {mu}")
    return OperatorWordPoly.from_dict({(D,): (1 + 1j * mu) / 2, (D_STAR,): (1 - 1j * mu) / 2})


def reversibility_transform(p: OperatorWordPoly) -> OperatorWordPoly:
    """R(D) = -D_*, R(D_*) = -D, extended multiplicatively and C-linearly."""
    return OperatorWordPoly.from_dict(
        {tuple(_REVERSED[letter] for letter in word): coef * (-1) ** len(word) for word, coef in p.terms}
    )


# --------------------------------------------------------------------------
# Embedded operators
# --------------------------------------------------------------------------

FORMS = ("standard", "brick", "brick-expanded")


@dataclass(frozen=True)
class EmbeddedOperatorSpec:
    """sum_i a_i(X, t) D_mu^i X + f(X, t).

    With ``form="brick"`` the first-order part is D_mu applied to the process
    a_1(X(t), t) instead of a_1 times D_mu X; ``"brick-expanded"`` replaces it
    by the classical chain rule d_t a_1 + a_1'(X) D_mu X.
    """

    degree: int
    coefficients: tuple[FieldExpr, ...]
    mu: int = 1
    form: str = "standard"
    forcing: Optional[FieldExpr] = None

    def __post_init__(self):
        if self.degree < 0:
            raise LabError("operator degree must be nonnegative")
        if len(self.coefficients) != self.degree + 1:
            raise LabError(
                f"degree {self.degree} needs {self.degree + 1} coefficients, got {len(self.coefficients)}"
            )
        if self.form not in FORMS:
            raise LabError(f"unknown operator form {self.form!r}")
        if self.form != "standard" and self.degree != 1:
            raise LabError("the composed form D o a is first order")
        if self.mu not in (-1, 0, 1):
            raise LabError(f"mu must be -1, 0 or 1, got {self.mu}")

    @property
    def dim(self) -> int:
        return self.coefficients[0].dim


def _is_zero(f: FieldExpr) -> bool:
    return is_constant(f) and not np.any(eval_field(f, 0.0, np.zeros(f.dim)))


def operator_terms(spec: EmbeddedOperatorSpec) -> list[tuple[str, OperatorWordPoly]]:
    """(label, polynomial) for each nonzero term; the free term counts as degree 0."""
    delta = build_Dmu(spec.mu)
    terms = [
        (f"a{i}={coef}", delta**i)
        for i, coef in enumerate(spec.coefficients)
        if not _is_zero(coef)
    ]
    if spec.forcing is not None and not _is_zero(spec.forcing):
        terms.append((f"f={spec.forcing}", OperatorWordPoly.identity()))
    return terms


@dataclass(frozen=True)
class ReversibilityVerdict:
    reversible: bool
    preserves_reversibility: bool
    witness: tuple[tuple[str, OperatorWordPoly], ...]
    matched: Optional[str] = None

    def witness_text(self) -> list[str]:
        return [f"{label}: {poly}" for label, poly in self.witness]


_CANDIDATES = (
    ("+O", 1, False),
    ("-O", -1, False),
    ("+conj(O)", 1, True),
    ("-conj(O)", -1, True),
)


def is_reversible(spec: EmbeddedOperatorSpec) -> ReversibilityVerdict:
    """Decide whether R maps the operator to +-O or +-conj(O), term by term.

    ``preserves_reversibility`` records R(D_mu) = -D_mu, which holds exactly
    for mu = 0.
    """
    terms = operator_terms(spec)
    transformed = tuple((label, reversibility_transform(poly)) for label, poly in terms)
    matched = None
    for name, sign, conj in _CANDIDATES:
        if all(
            image == (poly.conjugate() if conj else poly) * sign
            for (_, poly), (_, image) in zip(terms, transformed)
        ):
            matched = name
            break
    delta = build_Dmu(spec.mu)
    preserves = reversibility_transform(delta) == -delta
    return ReversibilityVerdict(matched is not None, preserves, transformed, matched)


def _coefficient_values(f: FieldExpr, t: float, x: np.ndarray, d: int) -> np.ndarray:
    values = eval_field(f, t, x)
    if f.is_scalar:
        return values[:, None]
    if f.shape != (d,):
        raise ShapeMismatchError(f"coefficient must be scalar or a {d}-vector, got shape {f.shape}")
    return values


def apply_embedded(
    spec: EmbeddedOperatorSpec,
    e: PathEnsemble,
    nf: NelsonFields,
    steps: Optional[Sequence[int]] = None,
) -> ComplexProcessSample:
    """Per-path residual sum_i a_i(X, t) D^i X + f(X, t)."""
    if spec.degree > 2:
        raise LabError("embedded operators of degree above 2 are not supported")
    if spec.dim != e.dim:
        raise ShapeMismatchError(f"operator has {spec.dim} coordinates, ensemble has {e.dim}")
    steps = np.arange(e.grid.n_steps + 1) if steps is None else np.asarray(steps, dtype=int)
    mu = spec.mu
    times = e.times[steps]
    states = e.values[:, steps, :]
    total = np.zeros(states.shape, dtype=complex)

    def pointwise(f: FieldExpr) -> np.ndarray:
        return np.stack([_coefficient_values(f, t, states[:, j, :], e.dim) for j, t in enumerate(times)], axis=1)

    derivatives = {0: states.astype(complex)}
    for i, coef in enumerate(spec.coefficients):
        if _is_zero(coef):
            continue
        if i == 1 and spec.form != "standard" and coef.is_scalar and e.dim > 1:
            raise ShapeMismatchError(f"the composed form needs a {e.dim}-vector coefficient")
        if i == 1 and spec.form == "brick":
            total += derivative_of_function(coef, e, nf, mu, steps).values
            continue
        if i == 1 and spec.form == "brick-expanded":
            total += _expanded_brick(coef, e, nf, mu, steps)
            continue
        if i not in derivatives:
            sample = nf.sample(e, mu, steps) if i == 1 else second_derivative(e, nf, mu, steps)
            derivatives[i] = sample.values
        total += pointwise(coef) * derivatives[i]
    if spec.forcing is not None:
        total += pointwise(spec.forcing)
    return ComplexProcessSample(e.grid, steps, total, SampleKind.RESIDUAL, mu)


def _expanded_brick(a: FieldExpr, e: PathEnsemble, nf: NelsonFields, mu: int, steps: np.ndarray) -> np.ndarray:
    vector = a if not a.is_scalar else FieldExpr(a.nodes, a.dim, (1,))
    jac = jacobian_field(vector)
    dt = dt_field(vector)
    dx = nf.sample(e, mu, steps).values
    out = np.empty((e.n_paths, len(steps), vector.shape[0]), dtype=complex)
    for j, s in enumerate(steps):
        t, x = e.times[s], e.values[:, s, :]
        out[:, j, :] = eval_field(dt, t, x) + np.einsum("pkj,pj->pk", eval_field(jac, t, x), dx[:, j, :])
    return out


@dataclass(frozen=True)
class ReversalComparison:
    original: float
    reversed: float
    difference: BootstrapSummary

    def consistent(self, n_se: float = 3.0, atol: float = 1e-9) -> bool:
        return abs(self.difference.estimate) <= n_se * self.difference.se + atol


def reversed_residual_check(
    spec: EmbeddedOperatorSpec,
    e: PathEnsemble,
    nf: NelsonFields,
    steps: Optional[Sequence[int]] = None,
    seed: int = 0,
) -> ReversalComparison:
    """Compare the time-averaged |residual| on the ensemble and on its reversal."""
    reversed_e = time_reverse(e)
    original = apply_embedded(spec, e, nf, steps)
    mirrored = apply_embedded(spec, reversed_e, nf.time_reversed(e.grid), steps)
    a = np.abs(original.values).sum(axis=2).mean(axis=1)
    b = np.abs(mirrored.values).sum(axis=2).mean(axis=1)
    summary = bootstrap_mean(a - b, seed)
    logger.info(
        f"Residual on ensemble {a.mean():.4g}, on reversed ensemble {b.mean():.4g}"
    )
    return ReversalComparison(float(a.mean()), float(b.mean()), summary)
