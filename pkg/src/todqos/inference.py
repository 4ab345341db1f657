"""Online prediction: forecast inputs over a horizon and evaluate the forest per step."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from todqos.errors import DataError, SchemaError
from todqos.featureset import STATIC_FEATURES, FeatureConfig, metrics
from todqos.rforest import Forest
from todqos.simkit.geometry import Topology
from todqos.simkit.trace import TraceLog
from todqos.tsforecast import MODES, ArimaOrder, Trajectory, forecast_features

MAX_STEPS = 60
ROLLING_HEADER = ["origin_t_s", "step_k", "true_bps", "pred_perfect_bps", "pred_arima_bps", "spread_bps"]


@dataclass
class PredictionRequest:
    feature_config: FeatureConfig
    horizon: float = 7.0
    step: float = 1.0
    input_mode: str = "perfect"
    location: tuple | None = None
    trajectory: Trajectory | None = None
    qos_parameter: str = "ul_throughput"

    def __post_init__(self):
        if self.qos_parameter != "ul_throughput":
            raise DataError(f"unsupported QoS parameter {self.qos_parameter!r}")
        if not (self.step > 0 and self.horizon >= self.step):
            raise DataError("need horizon >= step > 0")
        if self.n_steps > MAX_STEPS:
            raise DataError(f"horizon/step must not exceed {MAX_STEPS}")
        if self.input_mode not in MODES:
            raise DataError(f"unknown input mode {self.input_mode!r}")

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.horizon / self.step + 1e-9))


@dataclass
class PredictedSeries:
    t0: float
    step: float
    values: np.ndarray
    spreads: np.ndarray
    input_mode: str
    model_id: str = ""

    def __len__(self) -> int:
        return len(self.values)

    def step_times(self) -> np.ndarray:
        """Time at which each step ends (the value covers the preceding step)."""
        return self.t0 + self.step * np.arange(1, len(self.values) + 1)

    def to_dict(self) -> dict:
        return {"t0": self.t0, "step": self.step, "values": [float(v) for v in self.values],
                "spreads": [float(v) for v in self.spreads], "input_mode": self.input_mode,
                "model_id": self.model_id}


@dataclass
class InferenceEngine:
    forest: Forest
    topology: Topology
    sample_window: float = 0.1
    order: ArimaOrder = field(default_factory=ArimaOrder)
    history_len: int = 300
    model_id: str = ""

    def windows_per_step(self, step: float) -> int:
        k = int(round(step / self.sample_window))
        if k < 1 or abs(k * self.sample_window - step) > 1e-9:
            raise DataError(f"step {step} is not a multiple of the {self.sample_window} s sample window")
        return k

    def _columns(self, req: PredictionRequest) -> list[int]:
        if tuple(req.feature_config.columns) != tuple(self.forest.feature_config.columns):
            raise SchemaError(f"request feature config {req.feature_config.id} does not match "
                              f"the forest's {self.forest.feature_config.id}")
        return [STATIC_FEATURES.index(c) for c in req.feature_config.columns]

    def window_features(self, req: PredictionRequest, history: TraceLog,
                        ground_truth: TraceLog | None = None, mode: str | None = None) -> np.ndarray:
        mode = mode or req.input_mode
        n_win = req.n_steps * self.windows_per_step(req.step)
        traj = req.trajectory
        if traj is None and ground_truth is not None and len(ground_truth) >= n_win:
            # the ToD application knows its own route; take it from the recorded path
            traj = Trajectory.from_trace(ground_truth.slice(0, n_win))
        return forecast_features(history, n_win, mode, self.topology, trajectory=traj,
                                 ground_truth=ground_truth, order=self.order,
                                 history_len=self.history_len)

    def aggregate(self, req: PredictionRequest, per_tree: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Collapse (trees, windows) predictions into per-step mean and spread."""
        k = self.windows_per_step(req.step)
        steps = per_tree.reshape(per_tree.shape[0], -1, k).mean(axis=2)
        values = np.maximum(steps.mean(axis=0), 0.0)
        spreads = steps.std(axis=0, ddof=1) if steps.shape[0] > 1 else np.zeros(steps.shape[1])
        return values, spreads

    def handle_request(self, req: PredictionRequest, history: TraceLog,
                       ground_truth: TraceLog | None = None) -> PredictedSeries:
        cols = self._columns(req)
        X = self.window_features(req, history, ground_truth)
        values, spreads = self.aggregate(req, self.forest.predict_per_tree(X[:, cols]))
        t0 = float(history.t[-1] + self.sample_window) if len(history) else 0.0
        return PredictedSeries(t0, req.step, values, spreads, req.input_mode, self.model_id)


def handle_request(req: PredictionRequest, forest: Forest, history: TraceLog, topology: Topology,
                   ground_truth: TraceLog | None = None, **engine_kw) -> PredictedSeries:
    return InferenceEngine(forest, topology, **engine_kw).handle_request(req, history, ground_truth)


# --------------------------------------------------------------------------
# rolling evaluation


@dataclass
class RollingResult:
    origins: np.ndarray  # (O,) origin times
    truth: np.ndarray  # (O, K)
    predictions: dict  # mode -> (O, K)
    spreads: dict  # mode -> (O, K)

    @property
    def n_steps(self) -> int:
        return self.truth.shape[1]

    def step_table(self) -> list[dict]:
        rows = []
        for k in range(self.n_steps):
            row = {"step_k": k + 1}
            for mode, pred in self.predictions.items():
                rep = metrics(self.truth[:, k], pred[:, k])
                row[f"{mode}_mae"] = rep.mae
                row[f"{mode}_mape"] = rep.mape
            rows.append(row)
        return rows

    def horizon_metrics(self, mode: str):
        return metrics(self.truth.ravel(), self.predictions[mode].ravel())

    def step_mae(self, mode: str) -> np.ndarray:
        return np.abs(self.predictions[mode] - self.truth).mean(axis=0)

    def step_mape(self, mode: str) -> np.ndarray:
        return np.array([metrics(self.truth[:, k], self.predictions[mode][:, k]).mape
                         for k in range(self.n_steps)])

    def to_csv(self, path) -> None:
        """One row per (origin, step): the plot-ready rolling prediction table."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ROLLING_HEADER)
            perf = self.predictions.get("perfect")
            ari = self.predictions.get("arima")
            spread = self.spreads.get("perfect", self.spreads.get("arima"))
            for o, t0 in enumerate(self.origins):
                for k in range(self.n_steps):
                    w.writerow([repr(float(t0)), k + 1, repr(float(self.truth[o, k])),
                                repr(float(perf[o, k])) if perf is not None else "",
                                repr(float(ari[o, k])) if ari is not None else "",
                                repr(float(spread[o, k])) if spread is not None else ""])

    def write_step_table(self, path) -> None:
        rows = self.step_table()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def rolling_evaluate(trace: TraceLog, engine: InferenceEngine, template: PredictionRequest,
                     modes=("perfect", "arima"), stride: int | None = None) -> RollingResult:
    """Slide a request origin across ``trace`` and score every step of every request.

    Origins start once a full fitting window of history exists and advance by
    one step; the true value of a step is the mean windowed goodput over it.
    """
    k = engine.windows_per_step(template.step)
    n_win = template.n_steps * k
    stride = stride or k
    first = engine.history_len
    if len(trace) < first + n_win:
        raise DataError(f"trace of {len(trace)} windows is shorter than history + horizon "
                        f"({first + n_win})")
    cols = engine._columns(template)
    starts = np.arange(first, len(trace) - n_win + 1, stride)
    truth = np.stack([trace.tod_goodput[s:s + n_win].reshape(-1, k).mean(axis=1) for s in starts])
    preds, spreads = {}, {}
    for mode in modes:
        feats = []
        for s in starts:
            hist = trace.slice(max(0, s - engine.history_len), s)
            fut = trace.slice(s, s + n_win)
            feats.append(engine.window_features(template, hist, fut, mode=mode)[:, cols])
        per_tree = engine.forest.predict_per_tree(np.concatenate(feats))
        per_tree = per_tree.reshape(per_tree.shape[0], len(starts), n_win)
        vals = np.empty((len(starts), template.n_steps))
        sprd = np.empty_like(vals)
        for o in range(len(starts)):
            vals[o], sprd[o] = engine.aggregate(template, per_tree[:, o, :])
        preds[mode], spreads[mode] = vals, sprd
    return RollingResult(trace.t[starts].astype(float), truth, preds, spreads)


def write_series(path, series: PredictedSeries) -> None:
    Path(path).write_text("step_k,t_s,pred_bps,spread_bps\n" + "".join(
        f"{i + 1},{t!r},{float(v)!r},{float(s)!r}\n"
        for i, (t, v, s) in enumerate(zip(series.step_times(), series.values, series.spreads))))
