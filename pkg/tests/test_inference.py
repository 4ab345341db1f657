import numpy as np
import pytest

from todqos.errors import DataError, SchemaError
from todqos.featureset import PRESETS, apply_config, build_dataset, trace_features
from todqos.inference import (ROLLING_HEADER, InferenceEngine, PredictionRequest, handle_request,
                              rolling_evaluate)
from todqos.rforest import ForestHyperparams, fit
from todqos.simkit.config import ScenarioConfig
from todqos.simkit.geometry import build_topology
from todqos.simkit.trace import run


@pytest.fixture(scope="module")
def topo():
    return build_topology(ScenarioConfig())


@pytest.fixture(scope="module")
def trace():
    return run(ScenarioConfig(n_ntod=30, duration=20.0, ntod_load_multiplier=40.0, seed=2))


@pytest.fixture(scope="module")
def forest(trace, topo):
    ds = apply_config(build_dataset([trace], topo), PRESETS["T1"])
    return fit(ds, ForestHyperparams(n_trees=5, seed=1))


@pytest.fixture
def engine(forest, topo):
    return InferenceEngine(forest, topo, history_len=100, model_id="toy")


class TestRequest:
    def test_steps(self):
        assert PredictionRequest(PRESETS["T1"]).n_steps == 7
        assert PredictionRequest(PRESETS["T1"], horizon=3.0, step=0.5).n_steps == 6

    @pytest.mark.parametrize("kw", [{"horizon": 0.5}, {"horizon": 61.0}, {"input_mode": "x"},
                                    {"qos_parameter": "latency"}, {"step": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(DataError):
            PredictionRequest(PRESETS["T1"], **kw)


class TestAggregation:
    def test_hand_values(self, engine):
        req = PredictionRequest(PRESETS["T1"], horizon=2.0)
        per_tree = np.vstack([np.r_[np.full(10, 10.0), np.full(10, 4.0)],
                              np.r_[np.full(10, 20.0), np.full(10, 4.0)]])
        values, spreads = engine.aggregate(req, per_tree)
        assert values.tolist() == [15.0, 4.0]
        assert spreads == pytest.approx([np.sqrt(50.0), 0.0])

    def test_step_must_divide(self, engine):
        with pytest.raises(DataError):
            engine.windows_per_step(0.25)


class TestHandleRequest:
    def test_perfect_matches_forest(self, engine, forest, trace, topo):
        req = PredictionRequest(PRESETS["T1"], horizon=3.0)
        hist, fut = trace.slice(0, 100), trace.slice(100, 130)
        s = engine.handle_request(req, hist, fut)
        per_window = forest.predict(trace_features(fut, topo))
        assert s.values == pytest.approx(per_window.reshape(3, 10).mean(axis=1))
        assert s.t0 == pytest.approx(trace.t[100])
        assert s.model_id == "toy" and len(s) == 3
        assert np.all(s.spreads >= 0)

    def test_module_function(self, forest, trace, topo):
        req = PredictionRequest(PRESETS["T1"], horizon=2.0, input_mode="arima")
        a = handle_request(req, forest, trace.slice(0, 100), topo, history_len=100)
        b = handle_request(req, forest, trace.slice(0, 100), topo, history_len=100)
        assert np.array_equal(a.values, b.values)

    def test_schema_mismatch(self, engine, trace):
        with pytest.raises(SchemaError):
            engine.handle_request(PredictionRequest(PRESETS["T2"]), trace.slice(0, 100))


class TestRolling:
    def test_table(self, tmp_path, engine, trace):
        req = PredictionRequest(PRESETS["T1"], horizon=3.0)
        res = rolling_evaluate(trace, engine, req)
        # origins at 100, 110, ..., 170 windows
        assert len(res.origins) == 8 and res.n_steps == 3
        assert res.truth[0, 0] == pytest.approx(trace.tod_goodput[100:110].mean())
        assert res.step_mape("perfect").shape == (3,)
        p = tmp_path / "r.csv"
        res.to_csv(p)
        lines = p.read_text().splitlines()
        assert lines[0].split(",") == ROLLING_HEADER and len(lines) == 1 + 8 * 3

    def test_too_short(self, engine, trace):
        with pytest.raises(DataError):
            rolling_evaluate(trace.slice(0, 120), engine, PredictionRequest(PRESETS["T1"]))
