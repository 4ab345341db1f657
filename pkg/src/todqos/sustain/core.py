"""Subscriptions, crossing detection and the evaluation cycle of the QoS-sustainability service."""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from todqos.errors import ConfigError

MODES = ("one_shot", "continuous")
DEFAULT_RENOTIFY_S = 2.0


@dataclass(frozen=True)
class Subscription:
    sub_id: str
    thresholds: tuple  # bits/s, strictly ascending
    time_window: tuple  # (start s, end s)
    center: tuple | None = None  # circle area ...
    radius: float | None = None
    cells: tuple | None = None  # ... or a list of cell ids
    mode: str = "continuous"
    min_renotify_interval: float = DEFAULT_RENOTIFY_S

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        if not th:
            raise ConfigError("thresholds", "at least one threshold is required")
        if any(not math.isfinite(t) or t < 0 for t in th):
            raise ConfigError("thresholds", "thresholds must be finite and non-negative")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ConfigError("thresholds", "thresholds must be strictly ascending")
        object.__setattr__(self, "thresholds", th)
        try:
            start, end = (float(v) for v in self.time_window)
        except (TypeError, ValueError):
            raise ConfigError("time_window", "expected [start, end]") from None
        if not start < end:
            raise ConfigError("time_window", "start must be before end")
        object.__setattr__(self, "time_window", (start, end))
        if self.cells is not None:
            if not self.cells:
                raise ConfigError("cells", "cell list must not be empty")
            object.__setattr__(self, "cells", tuple(int(c) for c in self.cells))
        elif self.center is None or self.radius is None:
            raise ConfigError("area", "give either center+radius or a cell list")
        else:
            if not float(self.radius) > 0:
                raise ConfigError("radius", "radius must be positive")
            object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if self.mode not in MODES:
            raise ConfigError("mode", f"expected one of {MODES}")
        if self.min_renotify_interval < 0:
            raise ConfigError("min_renotify_interval", "must be >= 0")

    def covers(self, location, cell: int | None = None) -> bool:
        if self.cells is not None:
            return cell is not None and int(cell) in self.cells
        return math.hypot(location[0] - self.center[0], location[1] - self.center[1]) <= self.radius

    def in_window(self, t: float) -> bool:
        return self.time_window[0] <= t <= self.time_window[1]

    @classmethod
    def from_request(cls, sub_id: str, msg: dict) -> "Subscription":
        area = msg.get("area")
        if not isinstance(area, dict):
            raise ConfigError("area", "expected an object with center/radius or cells")
        known = {"center", "radius", "cells"}
        if set(area) - known:
            raise ConfigError("area", f"unknown keys {sorted(set(area) - known)}")
        for key in ("thresholds", "time_window"):
            if key not in msg:
                raise ConfigError(key, "missing")
        try:
            renotify = float(msg.get("min_renotify_interval", DEFAULT_RENOTIFY_S))
        except (TypeError, ValueError):
            raise ConfigError("min_renotify_interval", "expected a number") from None
        if not isinstance(msg["thresholds"], (list, tuple)):
            raise ConfigError("thresholds", "expected a list")
        try:
            thresholds = tuple(float(t) for t in msg["thresholds"])
        except (TypeError, ValueError):
            raise ConfigError("thresholds", "expected numbers") from None
        window = msg["time_window"]
        if not isinstance(window, (list, tuple)) or len(window) != 2:
            raise ConfigError("time_window", "expected [start, end]")
        return cls(sub_id, thresholds, tuple(window), area.get("center"), area.get("radius"),
                   area.get("cells"), msg.get("mode", "continuous"), renotify)


@dataclass(frozen=True)
class QoSNotification:
    sub_id: str
    issued_at: float
    predicted_crossing_at: float
    threshold: float
    predicted_value: float
    direction: str  # "below" | "above"
    spread: float

    def to_message(self) -> dict:
        return {"type": "notify", **asdict(self)}


@dataclass(frozen=True)
class SubscriptionState:
    """What has been notified so far, per threshold.

    ``side[th]`` is the last notified direction, valid from the predicted
    crossing time ``since[th]`` on; ``last_at[th]`` is when it was issued.
    """

    side: dict = field(default_factory=dict)
    since: dict = field(default_factory=dict)
    last_at: dict = field(default_factory=dict)
    notified: int = 0

    @property
    def expired_one_shot(self) -> bool:
        return self.notified > 0

    def expected(self, threshold: float, t: float) -> str:
        """Side of ``threshold`` the subscriber currently expects at time ``t``."""
        side = self.side.get(threshold)
        if side is None:
            return "above"
        if t >= self.since[threshold]:
            return side
        return "above" if side == "below" else "below"


def _side(value: float, threshold: float) -> str:
    return "below" if value < threshold else "above"


def evaluate(sub: Subscription, state: SubscriptionState, series, tod_location, now: float,
             tod_cell: int | None = None) -> tuple[list, SubscriptionState]:
    """Notifications triggered by one predicted series, and the updated state.

    For each threshold the earliest step whose side differs from what the
    subscriber was last told yields one notification. Before any
    notification the expected side is "above", so a series that starts under
    a threshold reports a "below" crossing at its first step.
    """
    if sub.mode == "one_shot" and state.expired_one_shot:
        return [], state
    if not sub.covers(tod_location, tod_cell):
        return [], state
    values = np.asarray(series.values, dtype=float)
    spreads = np.asarray(series.spreads, dtype=float)
    starts = series.t0 + series.step * np.arange(len(values))
    inside = [i for i in range(len(values)) if sub.in_window(float(starts[i]))]
    if not inside:
        return [], state
    found = []
    for th in sub.thresholds:
        for i in inside:
            cur = _side(values[i], th)
            if cur != state.expected(th, float(starts[i])):
                found.append((i, th, cur))
                break
    found.sort(key=lambda f: (f[0], f[1]))
    side, since, last_at = dict(state.side), dict(state.since), dict(state.last_at)
    out = []
    for i, th, direction in found:
        last = last_at.get(th)
        if last is not None and now - last < sub.min_renotify_interval:
            continue
        out.append(QoSNotification(sub.sub_id, float(now), float(starts[i]), th, float(values[i]),
                                   direction, float(spreads[i]) if len(spreads) else 0.0))
        side[th], since[th], last_at[th] = direction, float(starts[i]), float(now)
        if sub.mode == "one_shot":
            break
    return out, SubscriptionState(side, since, last_at, state.notified + len(out))


class SubscriptionRegistry:
    """Active subscriptions in creation order, with idempotent request ids."""

    def __init__(self):
        self._subs: dict[str, Subscription] = {}
        self._state: dict[str, SubscriptionState] = {}
        self._by_request: dict[str, str] = {}
        self._ids = itertools.count(1)

    def __len__(self) -> int:
        return len(self._subs)

    def __contains__(self, sub_id) -> bool:
        return sub_id in self._subs

    def subscribe(self, msg: dict, request_id: str | None = None) -> str:
        if request_id is not None and request_id in self._by_request:
            return self._by_request[request_id]
        sub_id = f"sub-{next(self._ids)}"
        sub = Subscription.from_request(sub_id, msg)
        self.add(sub)
        if request_id is not None:
            self._by_request[request_id] = sub_id
        return sub_id

    def add(self, sub: Subscription) -> None:
        self._subs[sub.sub_id] = sub
        self._state[sub.sub_id] = SubscriptionState()

    def unsubscribe(self, sub_id: str) -> bool:
        self._state.pop(sub_id, None)
        return self._subs.pop(sub_id, None) is not None

    def get(self, sub_id: str) -> Subscription:
        return self._subs[sub_id]

    def state(self, sub_id: str) -> SubscriptionState:
        return self._state[sub_id]

    def set_state(self, sub_id: str, state: SubscriptionState) -> None:
        self._state[sub_id] = state

    def active(self) -> list:
        return list(self._subs.values())

    def expire(self, now: float) -> list:
        """Drop finished one-shot subscriptions and those past their window."""
        gone = [s.sub_id for s in self._subs.values()
                if now > s.time_window[1] or (s.mode == "one_shot" and self._state[s.sub_id].expired_one_shot)]
        for sid in gone:
            self.unsubscribe(sid)
        return gone


@dataclass
class FlowSnapshot:
    """What the predictor reports for the single tracked ToD flow."""

    series: object  # PredictedSeries
    location: tuple
    cell: int | None = None


class SustainService:
    """One evaluation cycle = one prediction for the flow, evaluated against every subscription.

    ``predictor(now)`` returns a :class:`FlowSnapshot`; it is not called when
    there is nothing to evaluate.
    """

    def __init__(self, predictor, registry: SubscriptionRegistry | None = None):
        self.predictor = predictor
        self.registry = registry or SubscriptionRegistry()
        self.inference_calls = 0

    def cycle(self, now: float) -> list:
        self.registry.expire(now)
        subs = self.registry.active()
        if not subs:
            return []
        snap = self.predictor(now)
        self.inference_calls += 1
        out = []
        for sub in subs:
            notes, st = evaluate(sub, self.registry.state(sub.sub_id), snap.series, snap.location,
                                 now, snap.cell)
            self.registry.set_state(sub.sub_id, st)
            out.extend(notes)
        self.registry.expire(now)
        return out
