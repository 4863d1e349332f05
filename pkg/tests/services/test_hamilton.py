"""
Tests for the momentum process, the Legendre map and the stochastic Hamilton
equations on the stationary OU process, where D_{+1}X = -iX.
"""
import numpy as np
import pytest

from app.core.errors import ShapeMismatchError
from app.services.fieldexpr import parse_field
from app.services.hamilton import (
    HamiltonianSpec,
    energy_drift,
    hamilton_residuals,
    hamiltonian_identity_gap,
    legendre_check,
    momentum_process,
)
from app.services.lagrange import LagrangianSpec, el_residual
from app.services.nelson import analytic_nelson
from app.services.sde import DiffusionModel, GaussianLaw, TimeGrid, simulate_ensemble

STEPS = [0, 10, 25, 50]


@pytest.fixture(scope="module")
def ou():
    model = DiffusionModel.from_expressions(1, "[-x1]", 1.0, GaussianLaw(np.zeros(1), np.array([[0.5]])), "ou")
    e = simulate_ensemble(model, TimeGrid(0.0, 1.0, 50), 500, seed=8)
    return e, analytic_nelson(model, parse_field("exp(-x1^2)/sqrt(pi)", 1))


class TestHamiltonianSpec:
    def setup_method(self):
        self.H = HamiltonianSpec(LagrangianSpec(parse_field("x1*x2", 2), np.array([2.0, 4.0])))

    @pytest.mark.unit
    def test_legendre_map(self):
        np.testing.assert_allclose(self.H.velocity(np.array([[2.0, 4.0]])), [[1.0, 1.0]])
        np.testing.assert_allclose(self.H.inverse_mass, np.diag([0.5, 0.25]))

    @pytest.mark.unit
    def test_evaluate(self):
        """H = p.M^-1 p / 2 + U, bilinear in complex p."""
        p = np.array([2.0j, 0.0])
        x = np.array([1.0, 3.0])
        assert self.H.evaluate(p, x)[()] == pytest.approx(-1.0 + 3.0)
        np.testing.assert_allclose(self.H.grad_x(0.0, x), [3.0, 1.0])


class TestMomentum:
    @pytest.mark.unit
    def test_momentum_is_mass_times_velocity(self, ou):
        e, nf = ou
        L = LagrangianSpec(parse_field("x1^2", 1), np.array(2.0))
        P = momentum_process(e, L, nf, 1, STEPS)
        np.testing.assert_allclose(P.values, -2.0j * e.values[:, STEPS, :], atol=1e-12)

    @pytest.mark.unit
    def test_legendre_coherence(self, ou):
        e, nf = ou
        L = LagrangianSpec(parse_field("x1^2", 1), np.array(2.0))
        assert legendre_check(e, L, nf, 1, steps=STEPS).coherent

    @pytest.mark.unit
    def test_dimension_mismatch(self, ou):
        e, nf = ou
        with pytest.raises(ShapeMismatchError):
            momentum_process(e, LagrangianSpec(parse_field("x1*x2", 2)), nf)


class TestHamiltonEquations:
    def setup_method(self):
        self.L = LagrangianSpec(parse_field("0.5*x1^2", 1))
        self.H = HamiltonianSpec(self.L)

    @pytest.mark.unit
    def test_residuals_vanish(self, ou):
        e, nf = ou
        first, second = hamilton_residuals(e, self.H, nf, 1, STEPS)
        np.testing.assert_allclose(first.values, 0.0, atol=1e-12)
        np.testing.assert_allclose(second.values, 0.0, atol=1e-10)

    @pytest.mark.unit
    def test_second_equation_matches_euler_lagrange(self, ou):
        """With a wrong potential both residuals are X, and they agree."""
        e, nf = ou
        L = LagrangianSpec(parse_field("x1^2", 1))
        _, second = hamilton_residuals(e, HamiltonianSpec(L), nf, 1, STEPS)
        np.testing.assert_allclose(second.values, el_residual(e, L, nf, 1, STEPS).values, atol=1e-10)
        np.testing.assert_allclose(second.values, e.values[:, STEPS, :], atol=1e-10)

    @pytest.mark.unit
    def test_identity_gap(self, ou):
        e, nf = ou
        assert hamiltonian_identity_gap(e, self.H, nf.sample(e, 1, STEPS)) <= 1e-12

    @pytest.mark.integration
    def test_energy_is_constant(self, ou):
        """H(-iX, X) = -X^2/2 + X^2/2 vanishes along every path."""
        e, nf = ou
        report = energy_drift(e, self.H, nf, 1, np.arange(0, 51, 5), seed=3, n_resamples=100)
        np.testing.assert_allclose(report.value, 0.0, atol=1e-12)
        assert report.constant
