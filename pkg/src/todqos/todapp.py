"""Tele-operated driving application: uplink configuration ladder, safe-stop math and adaptation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from todqos.errors import ConfigError, DataError

MBPS = 1e6
LATENCY_S = 0.040
REDUCED_MIN, REDUCED_MAX = 3 * MBPS, 20 * MBPS


@dataclass(frozen=True)
class UplinkConfig:
    name: str
    rate_bps: float
    latency_s: float = LATENCY_S

    @property
    def label(self) -> str:
        if self.name == "Reduced":
            return f"Reduced({self.rate_bps / MBPS:.2f})"
        return self.name


FULL = UplinkConfig("Full", 32 * MBPS)
LIMITED = UplinkConfig("Limited", 20 * MBPS)
SLIM = UplinkConfig("Slim", 1 * MBPS)


def reduced(rate_bps: float) -> UplinkConfig:
    """Reduced profile; the requirement is clamped to the 3-20 Mbps range."""
    return UplinkConfig("Reduced", float(min(max(rate_bps, REDUCED_MIN), REDUCED_MAX)))


@dataclass(frozen=True)
class DownlinkConfig:
    mode: str  # "direct" | "indirect"
    rate_bps: float = 0.5 * MBPS

    @property
    def latency_s(self) -> float:
        return 0.040 if self.mode == "direct" else 0.080


def downlink_config(measured_latency_s: float | None) -> DownlinkConfig:
    """Direct control only when the measured downlink latency meets 40 ms."""
    if measured_latency_s is not None and measured_latency_s <= 0.040:
        return DownlinkConfig("direct")
    return DownlinkConfig("indirect")


@dataclass(frozen=True)
class SafeStopParams:
    a_desired_max: float = 4.0
    a_emergency: float = 10.0

    def __post_init__(self):
        if not 0 < self.a_desired_max < self.a_emergency:
            raise ConfigError("a_desired_max", "need 0 < a_desired_max < a_emergency")


def min_horizon(speed: float, params: SafeStopParams = SafeStopParams()) -> float:
    """Shortest prediction horizon that still allows stopping at the desired deceleration."""
    if speed < 0:
        raise DataError("speed must be >= 0")
    return speed / params.a_desired_max


def required_decel(speed: float, horizon: float, params: SafeStopParams = SafeStopParams()) -> tuple[float, str]:
    """Deceleration needed to stop within ``horizon`` and its comfort band."""
    if horizon <= 0:
        raise DataError("horizon must be > 0")
    a = speed / horizon
    if a <= params.a_desired_max:
        band = "desired"
    elif a <= params.a_emergency:
        band = "undesired"
    else:
        band = "infeasible"
    return a, band


def select_uplink_config(values, margin: float = 1.1) -> UplinkConfig | None:
    """Highest profile whose rate times ``margin`` fits under the predicted minimum.

    ``None`` signals that not even Slim can be sustained.
    """
    values = np.asarray(getattr(values, "values", values), dtype=float)
    if values.size == 0:
        raise DataError("predicted series is empty")
    if margin < 1.0:
        raise DataError("margin must be >= 1")
    low = float(values.min())
    for cfg in (FULL, LIMITED):
        if cfg.rate_bps * margin <= low:
            return cfg
    if REDUCED_MIN * margin <= low:
        r = low / margin
        while r * margin > low:  # keep the rate-times-margin bound exact under rounding
            r = float(np.nextafter(r, 0.0))
        return reduced(r)
    if SLIM.rate_bps * margin <= low:
        return SLIM
    return None


@dataclass(frozen=True)
class AppState:
    t: float
    speed: float
    config: UplinkConfig
    upgrade_since: float | None = None  # start of the current run of upgrade headroom


@dataclass(frozen=True)
class AdaptationDecision:
    action: str  # keep | switch_config | reduce_speed | safe_stop
    reason: str
    effective_at: float
    target: UplinkConfig | None = None
    new_speed: float | None = None
    decel: float | None = None
    predicted_min: float = float("nan")


@dataclass(frozen=True)
class AdaptationPolicy:
    margin: float = 1.1
    hold_time: float = 3.0
    keep_tolerance: float = 0.05
    upgrade_step_bps: float = 1 * MBPS
    safe_stop: SafeStopParams = SafeStopParams()


def decide(state: AppState, series, policy: AdaptationPolicy = AdaptationPolicy(),
           coverage: float | None = None) -> tuple[AdaptationDecision, AppState]:
    """One adaptation step given a predicted series (or an object with ``.values``).

    The current profile is kept while the predicted minimum stays within
    ``keep_tolerance`` of its rate, since a flow's goodput cannot exceed what
    it offers. Downgrades happen at once; upgrades need ``hold_time`` seconds
    of continuous headroom.
    """
    values = np.asarray(getattr(series, "values", series), dtype=float)
    low = float(values.min())
    step = float(getattr(series, "step", 1.0))
    coverage = len(values) * step if coverage is None else coverage
    now = state.t
    target = select_uplink_config(values, policy.margin)
    cur = state.config

    if low >= cur.rate_bps * (1.0 - policy.keep_tolerance):
        if target is not None and target.rate_bps >= cur.rate_bps + policy.upgrade_step_bps:
            since = state.upgrade_since if state.upgrade_since is not None else now
            if now - since >= policy.hold_time:
                return (AdaptationDecision("switch_config", f"sustained headroom for {now - since:.1f} s",
                                           now, target=target, predicted_min=low),
                        replace(state, config=target, upgrade_since=None))
            return (AdaptationDecision("keep", "upgrade headroom, holding", now, predicted_min=low),
                    replace(state, upgrade_since=since))
        return (AdaptationDecision("keep", "current profile sustained", now, predicted_min=low),
                replace(state, upgrade_since=None))

    if target is not None:
        return (AdaptationDecision("switch_config", f"predicted minimum {low / MBPS:.2f} Mbps",
                                   now, target=target, predicted_min=low),
                replace(state, config=target, upgrade_since=None))

    # not even the slimmest profile survives: stop or slow down
    params = policy.safe_stop
    if coverage > 0 and min_horizon(state.speed, params) <= coverage:
        a, _ = required_decel(state.speed, coverage, params)
        return (AdaptationDecision("safe_stop", "no sustainable profile", now, decel=a, predicted_min=low),
                replace(state, config=SLIM, speed=0.0, upgrade_since=None))
    v_new = params.a_desired_max * max(coverage, 0.0)
    if state.speed <= 0:
        return (AdaptationDecision("keep", "vehicle already stopped", now, predicted_min=low),
                replace(state, upgrade_since=None))
    return (AdaptationDecision("reduce_speed", "horizon too short for a comfortable stop", now,
                               new_speed=v_new, predicted_min=low),
            replace(state, speed=v_new, config=SLIM, upgrade_since=None))


DECISION_HEADER = ["t_s", "speed_mps", "predicted_min_bps", "action", "target_config", "decel_mps2"]


class DecisionLog:
    def __init__(self):
        self.rows: list[tuple] = []

    def record(self, decision: AdaptationDecision, speed: float) -> None:
        self.rows.append((decision.effective_at, speed, decision.predicted_min, decision.action,
                          decision.target.label if decision.target else "",
                          decision.decel if decision.decel is not None else ""))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DECISION_HEADER)
            for r in self.rows:
                w.writerow([repr(float(r[0])), repr(float(r[1])), repr(float(r[2])), r[3], r[4],
                            repr(float(r[5])) if r[5] != "" else ""])

