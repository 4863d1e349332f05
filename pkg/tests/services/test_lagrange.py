"""
Tests for natural and expression Lagrangians along stochastic velocities:
Euler-Lagrange residuals, the action, its first variation and Noether first integrals.

The coherent state of U = x^2/2 has law N(cos t, 1/2) and drift
-(x - cos t) - sin t; it solves M D_{+1}^2 X + grad U(X) = 0 exactly.
"""
import numpy as np
import pytest

from app.core.errors import FieldNameError, LabError, ShapeMismatchError
from app.services.fieldexpr import parse_field, parse_vector_field
from app.services.fields import combine
from app.services.lagrange import (
    ExpressionLagrangian,
    LagrangianSpec,
    SymmetryGroupSpec,
    action_functional,
    action_parts,
    el_residual,
    invariance_violation,
    noether_integral,
    stationarity_check,
    summarize_residual,
)
from app.services.nelson import analytic_nelson
from app.services.sde import DiffusionModel, GaussianLaw, PointMass, TimeGrid, simulate_ensemble

COHERENT_DRIFT = "[-(x1 - cos(t)) - sin(t)]"
COHERENT_DENSITY = "exp(-(x1 - cos(t))^2)/sqrt(pi)"


def coherent_model() -> DiffusionModel:
    return DiffusionModel.from_expressions(
        1, COHERENT_DRIFT, 1.0, GaussianLaw(np.ones(1), np.array([[0.5]])), "coherent"
    )


@pytest.fixture(scope="module")
def coherent():
    model = coherent_model()
    e = simulate_ensemble(model, TimeGrid(0.0, 1.0, 100), 8000, seed=31)
    return model, e, analytic_nelson(model, parse_field(COHERENT_DENSITY, 1))


class TestLagrangianSpec:
    @pytest.mark.unit
    def test_mass_forms(self):
        U = parse_field("0.5*(x1^2 + x2^2)", 2)
        np.testing.assert_allclose(LagrangianSpec(U).mass, np.eye(2))
        np.testing.assert_allclose(LagrangianSpec(U, np.array(2.0)).mass, 2.0 * np.eye(2))
        np.testing.assert_allclose(LagrangianSpec(U, np.array([1.0, 3.0])).mass, np.diag([1.0, 3.0]))

    @pytest.mark.unit
    def test_invalid_mass(self):
        U = parse_field("x1*x2", 2)
        with pytest.raises(LabError, match="symmetric"):
            LagrangianSpec(U, np.array([[1.0, 2.0], [0.0, 1.0]]))
        with pytest.raises(LabError, match="positive definite"):
            LagrangianSpec(U, np.array([[1.0, 0.0], [0.0, -1.0]]))
        with pytest.raises(LabError):
            LagrangianSpec(parse_field("[x1, x2]", 2))

    @pytest.mark.unit
    def test_complex_kinetic_energy(self):
        """The kinetic term is bilinear, not Hermitian."""
        L = LagrangianSpec(parse_field("0", 1))
        assert L.kinetic(np.array([1j]))[()] == pytest.approx(-0.5)
        assert L.evaluate(0.0, np.array([0.0]), np.array([2.0])) == pytest.approx(2.0)


class TestEulerLagrange:
    @pytest.mark.unit
    def test_coherent_state_solves_equation(self, coherent):
        _, e, nf = coherent
        L = LagrangianSpec(parse_field("0.5*x1^2", 1))
        residual = el_residual(e, L, nf, 1, np.arange(0, 101, 10))
        np.testing.assert_allclose(residual.values, 0.0, atol=1e-12)
        summary = summarize_residual(residual, seed=0, n_resamples=100)
        assert summary.within(3.0, 1e-10)

    @pytest.mark.unit
    def test_wrong_potential_is_rejected(self, coherent):
        """With U = x^2 the residual is X, whose mean cos t is far from zero."""
        _, e, nf = coherent
        residual = el_residual(e, LagrangianSpec(parse_field("x1^2", 1)), nf, 1, np.arange(0, 101, 10))
        summary = summarize_residual(residual, seed=0, n_resamples=100)
        assert not summary.within(3.0, 0.01)
        assert summary.max_abs_mean == pytest.approx(1.0, abs=0.05)

    @pytest.mark.unit
    def test_reversed_mode_is_conjugate(self, coherent):
        """Real drift and potential: the mu = -1 residual is the conjugate of the mu = +1 one."""
        _, e, nf = coherent
        steps = np.arange(0, 101, 10)
        for L in (
            LagrangianSpec(parse_field("x1^2", 1)),
            ExpressionLagrangian.parse("v1^3/3 - x1^2 + x1*v1", 1),
        ):
            forward = el_residual(e, L, nf, 1, steps)
            reversed_ = el_residual(e, L, nf, -1, steps)
            np.testing.assert_allclose(reversed_.values, np.conj(forward.values), atol=1e-12)
        assert np.max(np.abs(forward.values.imag)) > 0.1

    @pytest.mark.unit
    def test_dimension_mismatch(self, coherent):
        _, e, nf = coherent
        with pytest.raises(ShapeMismatchError):
            el_residual(e, LagrangianSpec(parse_field("x1*x2", 2)), nf)
        with pytest.raises(ShapeMismatchError):
            el_residual(e, ExpressionLagrangian.parse("0.5*(v1^2 + v2^2)", 2), nf)


class TestExpressionLagrangian:
    """Lagrangians written in x1..xd and v1..vd, polynomial in the velocities."""

    @pytest.mark.unit
    def test_natural_form_reproduces_natural_residual(self, coherent):
        _, e, nf = coherent
        steps = np.arange(0, 101, 10)
        natural = el_residual(e, LagrangianSpec(parse_field("0.5*x1^2", 1)), nf, 1, steps)
        written = el_residual(e, ExpressionLagrangian.parse("0.5*v1^2 - 0.5*x1^2", 1), nf, 1, steps)
        np.testing.assert_allclose(written.values, natural.values, atol=1e-10)
        np.testing.assert_allclose(written.values, 0.0, atol=1e-10)
        assert written.kind == natural.kind

    @pytest.mark.unit
    def test_wrong_potential_matches_natural_residual(self, coherent):
        """Away from a solution both routes give M D^2 X + grad U, here 2X."""
        _, e, nf = coherent
        steps = np.arange(0, 101, 20)
        natural = el_residual(e, LagrangianSpec(parse_field("x1^2", 1), np.array(2.0)), nf, 1, steps)
        written = el_residual(e, ExpressionLagrangian.parse("v1^2 - x1^2", 1), nf, 1, steps)
        np.testing.assert_allclose(written.values, natural.values, atol=1e-10)

    @pytest.mark.unit
    def test_total_derivative_leaves_residual_unchanged(self, coherent):
        _, e, nf = coherent
        steps = np.arange(0, 101, 10)
        base = el_residual(e, ExpressionLagrangian.parse("0.5*v1^2 - 0.5*x1^2", 1), nf, 1, steps)
        gauged_L = ExpressionLagrangian.parse("0.5*v1^2 - 0.5*x1^2 + x1*v1 + t*v1 + x1", 1)
        gauged = el_residual(e, gauged_L, nf, 1, steps)
        np.testing.assert_allclose(gauged.values, base.values, atol=1e-10)

    @pytest.mark.unit
    def test_complex_velocity_evaluation(self):
        L = ExpressionLagrangian.parse("0.5*v1^2 + x1*v2 - cos(x2)", 2)
        x = np.array([[1.0, 0.0]])
        v = np.array([[1j, 2.0 + 1j]])
        assert L.evaluate(0.0, x, v)[0] == pytest.approx(-0.5 + 2.0 + 1j - 1.0)
        np.testing.assert_allclose(L.momentum_at(0.0, x, v), [[1j, 1.0]])
        np.testing.assert_allclose(L.grad_x(0.0, x, v), [[2.0 + 1j, 0.0]])

    @pytest.mark.unit
    def test_velocity_must_enter_polynomially(self):
        for text in ("exp(v1) - x1", "1/v1", "v1^-2", "sqrt(v1^2)"):
            with pytest.raises(LabError, match="polynomial"):
                ExpressionLagrangian.parse(text, 1)
        ExpressionLagrangian.parse("exp(x1)*v1^3 + v1/x1", 1)

    @pytest.mark.unit
    def test_unknown_velocity(self):
        with pytest.raises(FieldNameError):
            ExpressionLagrangian.parse("0.5*v2^2", 1)

    @pytest.mark.unit
    def test_no_kinetic_and_potential_split(self, coherent):
        _, e, nf = coherent
        dX = nf.sample(e, 1, [0, 50, 100])
        with pytest.raises(LabError, match="natural Lagrangian"):
            action_parts(e, ExpressionLagrangian.parse("0.5*v1^2", 1), dX)


class TestAction:
    def setup_method(self):
        model = DiffusionModel.from_expressions(1, "[1]", 0.0, PointMass((0.0,)))
        self.e = simulate_ensemble(model, TimeGrid(0.0, 1.0, 10), 3, seed=0)
        self.dX = analytic_nelson(model).sample(self.e)

    @pytest.mark.unit
    def test_free_motion(self):
        """X = t with unit velocity: J = int 1/2 dt."""
        J = action_functional(self.e, LagrangianSpec(parse_field("0", 1)), self.dX)
        assert J == pytest.approx(0.5)

    @pytest.mark.unit
    def test_linear_potential(self):
        L = LagrangianSpec(parse_field("x1", 1))
        assert action_functional(self.e, L, self.dX) == pytest.approx(0.0, abs=1e-12)
        kinetic, potential = action_parts(self.e, L, self.dX)
        assert kinetic == pytest.approx(0.5)
        assert potential == pytest.approx(0.5)

    @pytest.mark.unit
    def test_action_is_real_linear(self, coherent):
        """J(aL) = a J(L), J(L1 + L2) = J(L1) + J(L2) and J = T - U, on complex velocities."""
        _, e, nf = coherent
        dX = nf.sample(e, 1, np.arange(0, 101, 10))
        L = LagrangianSpec(parse_field("0.5*x1^2 + sin(t)*x1", 1), np.array(1.5))
        J = action_functional(e, L, dX)
        for a in (0.5, 3.0):
            assert action_functional(e, L.scaled(a), dX) == pytest.approx(a * J, rel=1e-10, abs=1e-12)
        kinetic, potential = action_parts(e, L, dX)
        assert J == pytest.approx(kinetic - potential, rel=1e-10, abs=1e-12)

        # natural Lagrangians add their potentials and count the kinetic term once per summand
        U1, U2 = parse_field("0.5*x1^2", 1), parse_field("cos(x1) + t", 1)
        lhs = action_functional(e, LagrangianSpec(U1 + U2), dX) + action_functional(
            e, LagrangianSpec(parse_field("0", 1)), dX
        )
        rhs = action_functional(e, LagrangianSpec(U1), dX) + action_functional(e, LagrangianSpec(U2), dX)
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)

        written = ExpressionLagrangian.parse("0.75*v1^2 - 0.5*x1^2 - sin(t)*x1", 1)
        assert action_functional(e, written, dX) == pytest.approx(J, rel=1e-10, abs=1e-12)
        assert action_functional(e, written.scaled(-2.0), dX) == pytest.approx(-2.0 * J, rel=1e-10, abs=1e-12)


class TestFirstVariation:
    def setup_method(self):
        self.L = LagrangianSpec(parse_field("0.5*x1^2", 1))
        self.Z = parse_vector_field(["sin(pi*t)"], 1, 1)

    @pytest.mark.integration
    def test_coherent_state_is_stationary(self, coherent):
        _, e, nf = coherent
        report = stationarity_check(e, self.L, nf.sample(e), self.Z, [-0.1, -0.05, 0.05, 0.1], seed=1)
        assert report.stationary(3.0)
        assert abs(report.c2) > 0

    @pytest.mark.integration
    def test_scaled_drift_is_not_stationary(self, coherent):
        """Halving the drift moves the mean off cos t; c1 is then many standard errors away."""
        model, e, nf = coherent
        control_model = model.with_drift(combine((0.5 * np.eye(1), model.drift)), "control")
        control = simulate_ensemble(control_model, e.grid, e.n_paths, seed=32)
        report = stationarity_check(control, self.L, nf.sample(control), self.Z, [-0.1, 0.1], seed=1)
        assert report.ratio > 5.0

    @pytest.mark.unit
    def test_invalid_variations(self, coherent):
        _, e, nf = coherent
        dX = nf.sample(e, 1, [0, 50, 100])
        with pytest.raises(LabError, match="function of t only"):
            stationarity_check(e, self.L, dX, parse_vector_field(["x1*sin(pi*t)"], 1, 1), [0.1, -0.1])
        with pytest.raises(LabError, match="vanish at the endpoints"):
            stationarity_check(e, self.L, dX, parse_vector_field(["t"], 1, 1), [0.1, -0.1])
        with pytest.raises(LabError, match="two nonzero"):
            stationarity_check(e, self.L, dX, self.Z, [0.1])
        with pytest.raises(LabError, match="two nonzero"):
            stationarity_check(e, self.L, dX, self.Z, [0.0, 0.1])


class TestSymmetryGroups:
    @pytest.mark.unit
    def test_generators(self):
        x = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(SymmetryGroupSpec.translation([0, 0, 1]).generator(x), [[0.0, 0.0, 1.0]])
        rot = SymmetryGroupSpec.rotation_about_axis(2)
        assert rot.plane == (0, 1)
        np.testing.assert_allclose(rot.generator(x), [[-2.0, 1.0, 0.0]])
        assert rot.label == "rotation(x1,x2)"

    @pytest.mark.unit
    def test_invalid(self):
        with pytest.raises(LabError):
            SymmetryGroupSpec("dilation")
        with pytest.raises(LabError):
            SymmetryGroupSpec("rotation", plane=(1, 1))
        with pytest.raises(ShapeMismatchError):
            SymmetryGroupSpec.translation([1.0, 0.0]).generator(np.zeros((2, 3)))


class TestNoether:
    @pytest.mark.integration
    def test_translation_invariance(self):
        """x1 is free, so E[D X1] is conserved."""
        model = DiffusionModel.from_expressions(
            3, "[0, -x2, -x3]", 1.0, GaussianLaw(np.zeros(3), 0.5 * np.eye(3)), "free-x1"
        )
        density = parse_field(
            "exp(-x1^2/(2*(t + 0.5)))/sqrt(2*pi*(t + 0.5)) * exp(-x2^2 - x3^2)/pi", 3
        )
        e = simulate_ensemble(model, TimeGrid(0.0, 1.0, 100), 10000, seed=5)
        dX = analytic_nelson(model, density).sample(e, 1, np.arange(0, 101, 10))
        L = LagrangianSpec(parse_field("0.5*(x2^2 + x3^2)", 3))
        g = SymmetryGroupSpec.translation([1.0, 0.0, 0.0])
        report = noether_integral(e, L, g, dX, seed=2, slope_atol=0.05, n_resamples=200)
        assert report.invariance_violation == 0.0
        assert report.conserved
        assert report.to_dict()["verdict"] == "conserved"

    @pytest.mark.integration
    def test_scaling_the_lagrangian(self):
        """L -> 3L scales the integral and its scale but not the verdict."""
        model = DiffusionModel.from_expressions(1, "[0]", 1.0, GaussianLaw(np.zeros(1), np.array([[0.5]])))
        density = parse_field("exp(-x1^2/(2*(t + 0.5)))/sqrt(2*pi*(t + 0.5))", 1)
        e = simulate_ensemble(model, TimeGrid(0.0, 1.0, 50), 4000, seed=6)
        dX = analytic_nelson(model, density).sample(e, 1, np.arange(0, 51, 10))
        L = LagrangianSpec(parse_field("0", 1))
        g = SymmetryGroupSpec.translation([1.0])
        base = noether_integral(e, L, g, dX, seed=1, slope_atol=0.05, n_resamples=100)
        scaled = noether_integral(e, L.scaled(3.0), g, dX, seed=1, slope_atol=0.15, n_resamples=100)
        assert scaled.max_deviation == pytest.approx(3.0 * base.max_deviation)
        assert scaled.scale == pytest.approx(3.0 * base.scale)
        assert scaled.conserved == base.conserved

    @pytest.mark.integration
    def test_rotation_invariance(self):
        """The isotropic OU angular momentum vanishes path by path."""
        model = DiffusionModel.from_expressions(2, "[-x1, -x2]", 1.0, GaussianLaw(np.zeros(2), 0.5 * np.eye(2)))
        e = simulate_ensemble(model, TimeGrid(0.0, 1.0, 50), 2000, seed=7)
        dX = analytic_nelson(model, parse_field("exp(-x1^2 - x2^2)/pi", 2)).sample(e, 1, np.arange(0, 51, 10))
        L = LagrangianSpec(parse_field("0.5*(x1^2 + x2^2)", 2))
        report = noether_integral(e, L, SymmetryGroupSpec("rotation", plane=(0, 1)), dX, n_resamples=100)
        assert report.conserved
        assert abs(report.angular_momentum["x1^x2"]) < 1e-12

    @pytest.mark.integration
    def test_broken_symmetry(self, coherent):
        """U = x^2/2 is not translation invariant: the coherent-state momentum -sin t is not conserved."""
        _, e, nf = coherent
        L = LagrangianSpec(parse_field("0.5*x1^2", 1))
        g = SymmetryGroupSpec.translation([1.0])
        steps = np.arange(0, 101, 10)
        assert invariance_violation(L, g, e, steps) > 0.1
        report = noether_integral(e, L, g, nf.sample(e, 1, steps), n_resamples=100)
        assert not report.conserved
        assert report.integral[-1].real == pytest.approx(-np.sin(1.0), abs=0.05)

    @pytest.mark.integration
    def test_expression_lagrangian_matches_natural(self, coherent):
        _, e, nf = coherent
        g = SymmetryGroupSpec.translation([1.0])
        dX = nf.sample(e, 1, np.arange(0, 101, 10))
        natural = noether_integral(e, LagrangianSpec(parse_field("0.5*x1^2", 1)), g, dX, n_resamples=100)
        L = ExpressionLagrangian.parse("0.5*v1^2 - 0.5*x1^2", 1)
        written = noether_integral(e, L, g, dX, n_resamples=100)
        np.testing.assert_allclose(written.integral, natural.integral, atol=1e-12)
        assert written.conserved == natural.conserved
        assert invariance_violation(L, g, e, dX.steps, dX) > 0.1
        with pytest.raises(LabError, match="velocity sample"):
            invariance_violation(L, g, e, dX.steps)

    @pytest.mark.unit
    def test_velocity_coupled_invariance(self):
        """v1*x2 - v2*x1 is rotation invariant but not translation invariant."""
        model = DiffusionModel.from_expressions(2, "[-x1, -x2]", 1.0, GaussianLaw(np.zeros(2), 0.5 * np.eye(2)))
        e = simulate_ensemble(model, TimeGrid(0.0, 1.0, 20), 200, seed=8)
        dX = analytic_nelson(model, parse_field("exp(-x1^2 - x2^2)/pi", 2)).sample(e, 1, [0, 10, 20])
        L = ExpressionLagrangian.parse("0.5*(v1^2 + v2^2) + v1*x2 - v2*x1 - 0.5*(x1^2 + x2^2)", 2)
        rotation = SymmetryGroupSpec("rotation", plane=(0, 1))
        assert invariance_violation(L, rotation, e, dX.steps, dX) < 1e-10
        assert invariance_violation(L, SymmetryGroupSpec.translation([1.0, 0.0]), e, dX.steps, dX) > 0.1
