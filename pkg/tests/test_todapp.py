import numpy as np
import pytest

from todqos.errors import ConfigError, DataError
from todqos.todapp import (FULL, LIMITED, SLIM, AdaptationPolicy, AppState, DecisionLog,
                           DECISION_HEADER, SafeStopParams, downlink_config, decide, min_horizon,
                           reduced, required_decel, select_uplink_config)

MB = 1e6


class TestLadder:
    def test_order_and_latency(self):
        assert FULL.rate_bps > LIMITED.rate_bps >= reduced(12 * MB).rate_bps >= SLIM.rate_bps
        assert {c.latency_s for c in (FULL, LIMITED, SLIM, reduced(5 * MB))} == {0.040}

    def test_reduced_clamped(self):
        assert reduced(1 * MB).rate_bps == 3 * MB
        assert reduced(25 * MB).rate_bps == 20 * MB
        assert reduced(7 * MB).label == "Reduced(7.00)"

    def test_downlink(self):
        assert downlink_config(None).mode == "indirect"
        assert downlink_config(0.030).mode == "direct"
        assert downlink_config(0.030).latency_s < downlink_config(0.090).latency_s


class TestHorizonMath:
    def test_examples(self):
        assert min_horizon(0.0) == 0.0
        v100 = 100 / 3.6  # 100 km/h, quoted as 27.78 m/s
        assert min_horizon(v100) == pytest.approx(v100 / 4.0, abs=1e-9)
        assert round(min_horizon(v100), 3) == 6.944
        assert required_decel(13.89, 7.0) == (pytest.approx(1.9842857, abs=1e-6), "desired")
        assert required_decel(27.78, 2.0) == (pytest.approx(13.89), "infeasible")
        assert required_decel(20.0, 3.0)[1] == "undesired"

    def test_inverse_pair(self):
        rng = np.random.default_rng(0)
        for v in rng.uniform(0.1, 60.0, 100):
            assert required_decel(v, min_horizon(v))[0] == pytest.approx(4.0, abs=1e-12)

    def test_monotone(self):
        assert min_horizon(10.0) < min_horizon(11.0)
        assert min_horizon(10.0, SafeStopParams(5, 10)) < min_horizon(10.0, SafeStopParams(4, 10))

    def test_errors(self):
        with pytest.raises(DataError):
            required_decel(10.0, 0.0)
        with pytest.raises(ConfigError):
            SafeStopParams(12.0, 10.0)


class TestSelect:
    def test_examples(self):
        assert select_uplink_config([22 * MB, 30 * MB], margin=1.0) == LIMITED
        assert select_uplink_config([40 * MB], margin=1.0) == FULL
        assert select_uplink_config([0.8 * MB], margin=1.0) is None
        assert select_uplink_config([2 * MB], margin=1.0) == SLIM

    def test_monotone(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a = rng.uniform(0, 40 * MB, 7)
            b = a + rng.uniform(0, 5 * MB, 7)
            ca, cb = select_uplink_config(a), select_uplink_config(b)
            ra = ca.rate_bps if ca else 0.0
            rb = cb.rate_bps if cb else 0.0
            assert rb >= ra
            if ca is not None:
                assert ca.rate_bps * 1.1 <= a.min()


class TestDecide:
    def test_upgrade_after_hold(self):
        st = AppState(0.0, 13.89, LIMITED)
        actions = []
        for t in range(5):
            st = AppState(float(t), st.speed, st.config, st.upgrade_since)
            d, st = decide(st, np.full(7, 40 * MB))
            actions.append(d.action)
        assert actions == ["keep", "keep", "keep", "switch_config", "keep"]
        assert st.config == FULL

    def test_upgrade_interrupted(self):
        st = AppState(0.0, 13.89, LIMITED)
        _, st = decide(st, np.full(7, 40 * MB))
        _, st = decide(AppState(1.0, st.speed, st.config, st.upgrade_since), np.full(7, 21 * MB))
        assert st.upgrade_since is None

    def test_immediate_downgrade(self):
        d, st = decide(AppState(5.0, 13.89, LIMITED), np.full(7, 12 * MB))
        assert d.action == "switch_config" and d.effective_at == 5.0
        assert d.target.rate_bps == pytest.approx(12 * MB / 1.1)

    def test_keep_at_own_rate(self):
        # a flow cannot be predicted above what it offers; being at its rate is enough
        d, _ = decide(AppState(0.0, 13.89, LIMITED), np.full(7, 19.5 * MB))
        assert d.action == "keep"

    def test_safe_stop(self):
        d, st = decide(AppState(0.0, 13.89, LIMITED), np.full(7, 0.5 * MB))
        assert d.action == "safe_stop"
        assert d.decel == pytest.approx(13.89 / 7) and d.decel <= 4.0

    def test_reduce_speed_when_coverage_short(self):
        d, st = decide(AppState(0.0, 27.78, LIMITED), np.full(3, 0.5 * MB))
        assert d.action == "reduce_speed" and d.new_speed == pytest.approx(12.0) and d.new_speed < 27.78

    def test_decel_bounds(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            v, n = rng.uniform(0, 40), int(rng.integers(1, 8))
            d, _ = decide(AppState(0.0, v, LIMITED), np.full(n, 0.2 * MB))
            if d.action == "safe_stop":
                assert d.decel <= 4.0 <= 10.0

    def test_log(self, tmp_path):
        log = DecisionLog()
        d, _ = decide(AppState(0.0, 13.89, LIMITED), np.full(7, 0.5 * MB))
        log.record(d, 13.89)
        p = tmp_path / "d.csv"
        log.to_csv(p)
        lines = p.read_text().splitlines()
        assert lines[0].split(",") == DECISION_HEADER and lines[1].split(",")[3] == "safe_stop"

    def test_deterministic(self):
        args = (AppState(2.0, 10.0, FULL, 1.0), np.array([30e6, 25e6, 28e6]), AdaptationPolicy())
        assert decide(*args) == decide(*args)
