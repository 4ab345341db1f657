"""ARI(p, d) forecasting of the dynamic input features.

Each dynamic series (per-cell vehicle counts, per-cell demands and the
reciprocal NToD distance sum) gets its own autoregression fitted by ordinary
least squares on the differenced series. Forecasts are the deterministic
multi-step recursion, re-integrated from the stored tail.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from todqos.errors import DataError, InsufficientHistoryError
from todqos.featureset import assemble_features
from todqos.simkit.geometry import Topology
from todqos.simkit.trace import TraceLog

MODES = ("perfect", "arima", "persistence")


@dataclass(frozen=True)
class ArimaOrder:
    p: int = 2
    d: int = 1
    q: int = 0

    def __post_init__(self):
        if self.p < 0:
            raise DataError("AR order p must be >= 0")
        if self.d not in (0, 1):
            raise DataError("differencing order d must be 0 or 1")
        if self.q != 0:
            raise DataError("moving-average terms are not supported (q must be 0)")

    @property
    def min_length(self) -> int:
        return self.p + self.d + 5

    @classmethod
    def parse(cls, text: str) -> "ArimaOrder":
        parts = [int(v) for v in text.replace("(", "").replace(")", "").split(",")]
        return cls(*parts)


@dataclass
class ArimaModel:
    order: ArimaOrder
    ar_coeffs: np.ndarray
    intercept: float
    residual_std: float
    tail: np.ndarray  # last p + d raw observations

    def forecast(self, steps: int) -> np.ndarray:
        return forecast(self, steps)


def fit(series, order: ArimaOrder = ArimaOrder()) -> ArimaModel:
    y = np.asarray(series, dtype=float)
    if y.ndim != 1:
        raise DataError("series must be one-dimensional")
    if len(y) < order.min_length:
        raise InsufficientHistoryError(
            f"need at least {order.min_length} observations for order "
            f"({order.p},{order.d},0), got {len(y)}")
    if not np.all(np.isfinite(y)):
        raise DataError("series contains non-finite values")
    p, d = order.p, order.d
    z = np.diff(y) if d else y
    tail = y[len(y) - (p + d):].copy() if p + d else np.zeros(0)
    if np.ptp(z) == 0.0:
        # a constant (differenced) series is its own exact forecast
        return ArimaModel(order, np.zeros(p), float(z[0]), 0.0, tail)
    target = z[p:]
    design = np.ones((len(target), p + 1))
    for k in range(1, p + 1):
        design[:, k] = z[p - k:len(z) - k]
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    dof = max(len(target) - (p + 1), 1)
    return ArimaModel(order, coef[1:].copy(), float(coef[0]),
                      float(np.sqrt(resid @ resid / dof)), tail)


def forecast(model: ArimaModel, steps: int) -> np.ndarray:
    if steps < 1:
        raise DataError("steps must be >= 1")
    p, d = model.order.p, model.order.d
    tail = model.tail
    lags = list(np.diff(tail)) if d else list(tail)  # last p values on the differenced scale
    out = np.empty(steps)
    for h in range(steps):
        nxt = model.intercept
        for k in range(p):
            nxt += model.ar_coeffs[k] * lags[-1 - k]
        out[h] = nxt
        lags.append(nxt)
    if d:
        out = tail[-1] + np.cumsum(out)
    return out


# --------------------------------------------------------------------------
# feature-level forecasting


@dataclass
class Trajectory:
    """Planned ToD path over the horizon: one position and serving cell per window."""

    positions: np.ndarray  # (H, 2)
    serving: np.ndarray  # (H,)

    @classmethod
    def from_trace(cls, trace: TraceLog) -> "Trajectory":
        return cls(np.asarray(trace.tod_pos, dtype=float), np.asarray(trace.serving_cell, dtype=np.int64))

    @classmethod
    def stationary(cls, position, serving: int, steps: int) -> "Trajectory":
        return cls(np.tile(np.asarray(position, dtype=float), (steps, 1)), np.full(steps, int(serving)))


def _dynamic_history(history: TraceLog) -> np.ndarray:
    """(W, 2C + 1) matrix of the absolute-cell dynamic series."""
    dsum = np.asarray(history.ntod_dist_sum, dtype=float)
    recip = np.divide(1.0, dsum, out=np.zeros(len(dsum)), where=dsum > 0)
    return np.column_stack([history.counts.astype(float), history.demand, recip])


def forecast_features(history: TraceLog, horizon_steps: int, mode: str, topology: Topology, *,
                      trajectory: Trajectory | None = None, ground_truth: TraceLog | None = None,
                      order: ArimaOrder = ArimaOrder(), history_len: int = 300) -> np.ndarray:
    """Feature matrix (horizon_steps, 22) for the windows after ``history``.

    Dynamic series are forecast per absolute cell and then laid out relative
    to the planned serving cell. Position features come from ``trajectory``;
    without one the last observed position and cell are held.
    """
    if mode not in MODES:
        raise DataError(f"unknown input mode {mode!r}; expected one of {MODES}")
    if horizon_steps < 1:
        raise DataError("horizon_steps must be >= 1")
    if mode == "perfect":
        if ground_truth is None or len(ground_truth) < horizon_steps:
            raise DataError("perfect input mode needs ground-truth windows covering the horizon")
        gt = ground_truth.slice(0, horizon_steps)
        return assemble_features(gt.tod_pos, gt.serving_cell, gt.counts, gt.demand,
                                 gt.ntod_dist_sum, topology)
    C = topology.num_cells
    if trajectory is None:
        if len(history):
            trajectory = Trajectory.stationary(history.tod_pos[-1], history.serving_cell[-1], horizon_steps)
        else:
            trajectory = Trajectory.stationary((0.0, 0.0), 0, horizon_steps)
    if len(trajectory.positions) < horizon_steps:
        raise DataError("planned trajectory is shorter than the horizon")
    dyn = _dynamic_history(history)[-history_len:] if len(history) else np.zeros((0, 2 * C + 1))
    if len(dyn) == 0:
        future = np.zeros((horizon_steps, 2 * C + 1))
    elif mode == "persistence" or len(dyn) < order.min_length:
        future = np.tile(dyn[-1], (horizon_steps, 1))
    else:
        future = np.column_stack([forecast(fit(dyn[:, j], order), horizon_steps)
                                  for j in range(dyn.shape[1])])
        future[:, :C] = np.maximum(np.rint(future[:, :C]), 0.0)
        future = np.maximum(future, 0.0)
    recip = future[:, 2 * C]
    dsum = np.divide(1.0, recip, out=np.zeros(horizon_steps), where=recip > 0)
    X = assemble_features(trajectory.positions[:horizon_steps], trajectory.serving[:horizon_steps],
                          future[:, :C], future[:, C:2 * C], dsum, topology)
    X[:, 21] = recip  # keep the forecast value itself rather than 1/(1/r)
    return X
