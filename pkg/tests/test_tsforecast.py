import numpy as np
import pytest

from todqos.errors import DataError, InsufficientHistoryError
from todqos.featureset import trace_features
from todqos.simkit.config import ScenarioConfig
from todqos.simkit.geometry import build_topology
from todqos.simkit.trace import run
from todqos.tsforecast import ArimaOrder, Trajectory, fit, forecast, forecast_features


@pytest.fixture(scope="module")
def trace():
    return run(ScenarioConfig(n_ntod=12, duration=12.0, ntod_load_multiplier=40.0, seed=5))


@pytest.fixture(scope="module")
def topo():
    return build_topology(ScenarioConfig())


class TestArima:
    def test_order_validation(self):
        with pytest.raises(DataError):
            ArimaOrder(1, 1, 1)
        with pytest.raises(DataError):
            ArimaOrder(2, 3, 0)
        assert ArimaOrder.parse("(3,1,0)") == ArimaOrder(3, 1, 0)

    def test_recovers_ar1(self):
        rng = np.random.default_rng(0)
        x = np.zeros(5000)
        for t in range(1, len(x)):
            x[t] = 0.8 * x[t - 1] + rng.normal()
        m = fit(x, ArimaOrder(1, 0, 0))
        assert m.ar_coeffs[0] == pytest.approx(0.8, abs=0.03)
        assert abs(m.intercept) < 0.1
        assert m.residual_std == pytest.approx(1.0, abs=0.05)

    def test_recovers_ar1_short_low_noise(self):
        rng = np.random.default_rng(8)
        x = np.zeros(500)
        for t in range(1, len(x)):
            x[t] = 0.8 * x[t - 1] + rng.normal(scale=0.1)
        assert fit(x, ArimaOrder(1, 0, 0)).ar_coeffs[0] == pytest.approx(0.8, abs=0.1)

    def test_ar1_forecast_decays(self):
        rng = np.random.default_rng(1)
        x = np.zeros(3000)
        for t in range(1, len(x)):
            x[t] = 0.5 * x[t - 1] + rng.normal()
        x[-1] = 8.0
        f = forecast(fit(x, ArimaOrder(1, 0, 0)), 30)
        assert abs(f[0]) < 8.0 and abs(f[-1]) < 0.2

    @pytest.mark.parametrize("order", [(0, 0, 0), (1, 0, 0), (2, 1, 0), (3, 0, 0), (5, 1, 0)])
    def test_constant_exact(self, order):
        m = fit(np.full(40, 7.25), ArimaOrder(*order))
        for steps in (1, 5, 60):
            assert np.array_equal(forecast(m, steps), np.full(steps, 7.25))

    def test_ramp_extrapolates(self):
        assert forecast(fit(np.arange(1.0, 51.0), ArimaOrder(1, 1, 0)), 1)[0] == pytest.approx(51.0, abs=0.5)
        f = forecast(fit(np.arange(1.0, 51.0)), 3)
        assert f == pytest.approx([51.0, 52.0, 53.0])

    def test_translation_consistent(self):
        rng = np.random.default_rng(2)
        x = np.cumsum(rng.normal(size=200))
        a = forecast(fit(x), 6)
        b = forecast(fit(x + 1000.0), 6)
        assert b - 1000.0 == pytest.approx(a, abs=1e-8)

    def test_short_history(self):
        with pytest.raises(InsufficientHistoryError):
            fit(np.arange(5.0), ArimaOrder(2, 1, 0))
        assert ArimaOrder(2, 1, 0).min_length == 8

    def test_bad_steps(self):
        with pytest.raises(DataError):
            forecast(fit(np.arange(20.0)), 0)


class TestFeatureForecast:
    def test_perfect_is_ground_truth(self, trace, topo):
        hist, fut = trace.slice(0, 60), trace.slice(60, 90)
        X = forecast_features(hist, 30, "perfect", topo, ground_truth=fut)
        assert np.array_equal(X, trace_features(fut, topo))

    def test_perfect_needs_truth(self, trace, topo):
        with pytest.raises(DataError):
            forecast_features(trace.slice(0, 60), 30, "perfect", topo, ground_truth=trace.slice(60, 70))

    def test_persistence_repeats_last(self, trace, topo):
        hist = trace.slice(0, 60)
        X = forecast_features(hist, 5, "persistence", topo)
        last = trace_features(hist, topo)[-1]
        assert np.allclose(X, np.tile(last, (5, 1)))

    def test_arima_shapes_and_ranges(self, trace, topo):
        hist = trace.slice(0, 100)
        traj = Trajectory.from_trace(trace.slice(100, 120))
        X = forecast_features(hist, 20, "arima", topo, trajectory=traj)
        assert X.shape == (20, 22)
        assert np.all(X[:, 3:12] >= 0) and np.all(X[:, 3:12] == np.rint(X[:, 3:12]))
        assert np.all(X >= 0)
        assert np.array_equal(X[:, :2], traj.positions)

    def test_constant_history_forecast_exact(self, trace, topo):
        # freeze one window: every dynamic series is constant, so ARIMA equals persistence
        idx = np.full(50, 10)
        hist = trace.slice(0, 50)
        for name in ("tod_pos", "serving_cell", "counts", "demand", "ntod_dist_sum"):
            setattr(hist, name, getattr(trace, name)[idx].copy())
        a = forecast_features(hist, 8, "arima", topo)
        p = forecast_features(hist, 8, "persistence", topo)
        assert np.allclose(a, p)

    def test_empty_history(self, topo, trace):
        X = forecast_features(trace.slice(0, 0), 4, "arima", topo)
        assert np.all(X[:, 3:] == 0)

    def test_unknown_mode(self, trace, topo):
        with pytest.raises(DataError):
            forecast_features(trace, 3, "oracle", topo)
