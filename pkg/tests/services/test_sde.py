"""
Tests for the diffusion simulator: grids, initial laws, per-path seeded streams,
numerical aborts, time reversal and ensemble files.
"""
import numpy as np
import pytest

from app.core.errors import LabError, NumericalAbort
from app.services import sde
from app.services.sde import (
    BLOCK_SIZE,
    DiffusionModel,
    GaussianLaw,
    PathEnsemble,
    PointMass,
    SampleLaw,
    TabulatedLaw,
    TimeGrid,
    ensemble_moments,
    load_ensemble_binary,
    load_initial_samples,
    path_stream,
    save_ensemble_binary,
    save_ensemble_csv,
    simulate_ensemble,
    time_reverse,
)


def ou_model(initial=None) -> DiffusionModel:
    """Stationary Ornstein-Uhlenbeck process dX = -X dt + dW."""
    initial = initial or GaussianLaw(np.zeros(1), np.array([[0.5]]))
    return DiffusionModel.from_expressions(1, "[-x1]", 1.0, initial, "ou")


class TestTimeGrid:
    @pytest.mark.unit
    def test_spacing(self):
        g = TimeGrid(0.0, 1.0, 4)
        assert g.dt == pytest.approx(0.25)
        np.testing.assert_allclose(g.times, [0.0, 0.25, 0.5, 0.75, 1.0])
        assert g.index_of(0.5) == 2
        assert g.t_total == pytest.approx(1.0)

    @pytest.mark.unit
    def test_invalid(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 1.0, 10)
        with pytest.raises(ValueError):
            TimeGrid(0.0, 1.0, 1)

    @pytest.mark.unit
    def test_off_grid_time(self):
        with pytest.raises(LabError):
            TimeGrid(0.0, 1.0, 4).index_of(2.0)


class TestInitialLaws:
    def setup_method(self):
        self.rng = np.random.default_rng(3)

    @pytest.mark.unit
    def test_point_mass(self):
        draw = PointMass((1.0, -2.0)).draw(self.rng, 3)
        np.testing.assert_array_equal(draw, [[1.0, -2.0]] * 3)

    @pytest.mark.unit
    def test_gaussian_rejects_bad_covariance(self):
        with pytest.raises(ValueError):
            GaussianLaw(np.zeros(2), np.array([[1.0, 2.0], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            GaussianLaw(np.zeros(2), np.eye(3))

    @pytest.mark.unit
    def test_gaussian_moments(self):
        cov = np.array([[1.0, 0.6], [0.6, 2.0]])
        draw = GaussianLaw(np.array([1.0, -1.0]), cov).draw(self.rng, 40000)
        np.testing.assert_allclose(draw.mean(axis=0), [1.0, -1.0], atol=0.03)
        np.testing.assert_allclose(np.cov(draw.T), cov, atol=0.05)

    @pytest.mark.unit
    def test_tabulated_law_moments(self):
        """Inverse-CDF sampling of exp(-x^2)/sqrt(pi) has mean 0 and variance 1/2."""
        xs = np.linspace(-8.0, 8.0, 2001)
        law = TabulatedLaw(xs, np.exp(-xs**2) / np.sqrt(np.pi))
        draw = law.draw(self.rng, 20000)[:, 0]
        assert abs(draw.mean()) < 0.03
        assert draw.var() == pytest.approx(0.5, abs=0.03)

    @pytest.mark.unit
    def test_csv_samples(self, tmp_path):
        path = tmp_path / "init.csv"
        path.write_text("# x1,x2\n1.0,2.0\n3.0,4.0\n")
        law = load_initial_samples(path)
        assert isinstance(law, SampleLaw)
        assert law.dim == 2
        assert set(map(tuple, law.draw(self.rng, 50))) <= {(1.0, 2.0), (3.0, 4.0)}


class TestSimulation:
    def setup_method(self):
        self.grid = TimeGrid(0.0, 1.0, 50)

    @pytest.mark.unit
    def test_model_validation(self):
        with pytest.raises(ValueError):
            DiffusionModel.from_expressions(2, "[-x1, -x2]", 1.0, PointMass((0.0,)))
        model = DiffusionModel.from_expressions(2, "[-x1, -x2]", 2.0, PointMass((0.0, 0.0)))
        np.testing.assert_allclose(model.constant_diffusion_matrix(), 4.0 * np.eye(2))
        varying = DiffusionModel.from_expressions(1, "[0]", "1 + x1^2", PointMass((0.0,)))
        assert varying.constant_diffusion_matrix() is None

    @pytest.mark.integration
    def test_worker_count_does_not_change_paths(self):
        """Every path has its own seeded stream, so threading is invisible in the result."""
        serial = simulate_ensemble(ou_model(), self.grid, 2500, seed=11, workers=1)
        threaded = simulate_ensemble(ou_model(), self.grid, 2500, seed=11, workers=3)
        np.testing.assert_array_equal(serial.values, threaded.values)

    @pytest.mark.unit
    def test_seed_changes_paths(self):
        a = simulate_ensemble(ou_model(), self.grid, 100, seed=1)
        b = simulate_ensemble(ou_model(), self.grid, 100, seed=2)
        assert not np.array_equal(a.values, b.values)

    @pytest.mark.integration
    def test_paths_do_not_depend_on_block_layout(self, monkeypatch):
        """Path i comes from stream (seed, i) whatever the ensemble size or block size."""
        big = simulate_ensemble(ou_model(), self.grid, BLOCK_SIZE + 10, seed=5)
        small = simulate_ensemble(ou_model(), self.grid, 10, seed=5)
        np.testing.assert_array_equal(big.values[:10], small.values)

        monkeypatch.setattr(sde, "BLOCK_SIZE", 7)
        reblocked = simulate_ensemble(ou_model(), self.grid, 30, seed=5, workers=2)
        np.testing.assert_array_equal(reblocked.values, big.values[:30])

    @pytest.mark.unit
    def test_initial_state_comes_from_path_stream(self):
        law = GaussianLaw(np.zeros(1), np.array([[0.5]]))
        e = simulate_ensemble(ou_model(law), self.grid, 5, seed=9)
        expected = law.draw(path_stream(9, 3), 1)[0]
        np.testing.assert_array_equal(e.values[3, 0], expected)

    @pytest.mark.unit
    def test_zero_noise_is_euler_recursion(self):
        model = DiffusionModel.from_expressions(1, "[-x1]", 0.0, PointMass((1.0,)))
        e = simulate_ensemble(model, self.grid, 3, seed=0)
        expected = (1.0 - self.grid.dt) ** np.arange(self.grid.n_steps + 1)
        for path in e.values[:, :, 0]:
            np.testing.assert_allclose(path, expected, rtol=1e-12)

    @pytest.mark.unit
    def test_blow_up_aborts_with_location(self):
        model = DiffusionModel.from_expressions(1, "[x1^3]", 0.0, PointMass((10.0,)))
        with pytest.raises(NumericalAbort) as err:
            simulate_ensemble(model, TimeGrid(0.0, 5.0, 50), 4, seed=0)
        assert err.value.path_index == 0
        assert err.value.step is not None and err.value.step < 10

    @pytest.mark.unit
    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            simulate_ensemble(ou_model(), self.grid, 0, seed=0)
        with pytest.raises(ValueError):
            simulate_ensemble(ou_model(), self.grid, 10, seed=-1)

    @pytest.mark.integration
    def test_stationary_moments(self):
        """The stationary OU law N(0, 1/2) is preserved up to sampling and step error."""
        e = simulate_ensemble(ou_model(), TimeGrid(0.0, 1.0, 100), 20000, seed=2024)
        m = ensemble_moments(e)
        assert abs(m.mean[-1, 0]) <= 4 * m.mean_se[-1, 0]
        assert abs(m.variance[-1, 0] - 0.5) <= 4 * m.variance_se[-1, 0] + 0.005

    @pytest.mark.integration
    def test_weak_order_one_on_ou_mean(self):
        """|E[X(1)] - e^-1| from X(0) = 1 stays below C dt + 3 sd/sqrt(N) as dt shrinks."""
        exact = np.exp(-1.0)
        n_paths = 20000
        dts, means = [], []
        for n_steps in (25, 50, 100, 200):
            e = simulate_ensemble(ou_model(PointMass((1.0,))), TimeGrid(0.0, 1.0, n_steps), n_paths, seed=77)
            m = ensemble_moments(e)
            dt = 1.0 / n_steps
            noise = 3.0 * np.sqrt(m.variance[-1, 0] / n_paths)
            assert abs(m.mean[-1, 0] - exact) <= 0.5 * dt + noise
            dts.append(dt)
            means.append(m.mean[-1, 0])
        intercept = np.polyfit(dts, means, 1)[1]
        assert abs(intercept - exact) <= 0.03

    @pytest.mark.unit
    def test_ensemble_is_read_only(self):
        e = simulate_ensemble(ou_model(), self.grid, 10, seed=0)
        with pytest.raises(ValueError):
            e.values[0, 0, 0] = 1.0

    @pytest.mark.unit
    def test_non_finite_values_rejected(self):
        values = np.zeros((2, 3, 1))
        values[1, 2, 0] = np.nan
        with pytest.raises(NumericalAbort):
            PathEnsemble(TimeGrid(0.0, 1.0, 2), values, seed=0)


class TestReversalAndFiles:
    def setup_method(self):
        self.e = simulate_ensemble(ou_model(), TimeGrid(0.0, 1.0, 20), 30, seed=9)

    @pytest.mark.unit
    def test_time_reverse(self):
        """Reversal flips the time axis and toggles the provenance tag."""
        r = time_reverse(self.e)
        np.testing.assert_array_equal(r.values[:, 0], self.e.values[:, -1])
        assert r.model_tag == "ou:reversed"
        assert time_reverse(r).model_tag == "ou"
        np.testing.assert_array_equal(time_reverse(r).values, self.e.values)

    @pytest.mark.unit
    def test_binary_file(self, tmp_path):
        path = save_ensemble_binary(self.e, tmp_path / "e.ens")
        loaded = load_ensemble_binary(path)
        np.testing.assert_array_equal(loaded.values, self.e.values)
        assert (loaded.seed, loaded.model_tag, loaded.grid) == (9, "ou", self.e.grid)
        law = load_initial_samples(path)
        np.testing.assert_array_equal(law.samples, self.e.values[:, -1, :])

    @pytest.mark.unit
    def test_truncated_binary_file(self, tmp_path):
        path = save_ensemble_binary(self.e, tmp_path / "e.ens")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(LabError, match="truncated"):
            load_ensemble_binary(path)
        bad = tmp_path / "bad.ens"
        bad.write_bytes(b"not an ensemble")
        with pytest.raises(LabError):
            load_ensemble_binary(bad)

    @pytest.mark.unit
    def test_csv_layout(self, tmp_path):
        path = save_ensemble_csv(self.e, tmp_path / "e.csv")
        table = np.loadtxt(path, delimiter=",")
        assert table.shape == (30 * 21, 4)
        np.testing.assert_array_equal(table[:21, 1], np.arange(21))
        np.testing.assert_allclose(table[:21, 3], self.e.values[0, :, 0])
