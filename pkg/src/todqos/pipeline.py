"""Pipeline stages behind the command line: simulate, build datasets, train, evaluate, infer, demo.

Every stage reads and writes files under one output directory, so stages can
be rerun individually and a rerun with the same inputs reproduces the same
bytes.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from todqos import rforest
from todqos.errors import ConfigError, DataError
from todqos.featureset import (PRESETS, STATIC_FEATURES, Dataset, FeatureConfig, apply_config,
                               build_dataset, metrics, split)
from todqos.inference import InferenceEngine, PredictionRequest, rolling_evaluate
from todqos.simkit.config import ScenarioConfig
from todqos.simkit.geometry import build_topology
from todqos.simkit.trace import TraceLog, default_scenario_id, manifest_path, run
from todqos.sustain.core import SubscriptionRegistry, SustainService
from todqos.sustain.server import TraceReplay
from todqos.todapp import LIMITED, AdaptationPolicy, AppState, DecisionLog, decide
from todqos.tsforecast import ArimaOrder

log = logging.getLogger(__name__)

DEFAULT_LEVELS = (0, 5, 15, 30, 40, 50, 70, 80, 100, 130, 160)
# Per-vehicle load scaling at which the simulated cell-load bands span the
# full range from an unloaded 20 Mbps down to single-digit Mbps at 160 NToD.
DEFAULT_MULTIPLIER = 40.0
_LEVEL_RE = re.compile(r"ntod(\d+)-seed(\d+)")


@dataclass
class ExperimentPlan:
    load_levels: list = field(default_factory=lambda: list(DEFAULT_LEVELS))
    seeds_per_level: int = 3
    duration: float = 600.0
    holdout_levels: list = field(default_factory=lambda: [80])
    configs: list = field(default_factory=lambda: list(PRESETS))
    ntod_load_multiplier: float = DEFAULT_MULTIPLIER
    train_fraction: float = 2.0 / 3.0
    split_seed: int = 0

    def __post_init__(self):
        if not self.load_levels:
            raise ConfigError("load_levels", "at least one level is required")
        if any(n < 0 for n in self.load_levels):
            raise ConfigError("load_levels", "levels must be >= 0")
        if self.seeds_per_level < 1:
            raise ConfigError("seeds_per_level", "must be >= 1")
        if not set(self.holdout_levels) <= set(self.load_levels):
            raise ConfigError("holdout_levels", "must be a subset of load_levels")
        for c in self.configs:
            FeatureConfig.parse(c)


@dataclass
class DemoSettings:
    n_ntod: int = 40
    duration: float = 120.0
    base_multiplier: float = DEFAULT_MULTIPLIER
    surge_at: float = 70.0
    surge_multiplier: float = 200.0
    threshold_bps: float = 15e6
    start: float = 30.0
    speed_mps: float = 13.89
    input_mode: str = "perfect"
    seed: int = 7


@dataclass
class PipelineConfig:
    scenario: dict = field(default_factory=dict)  # ScenarioConfig overrides
    plan: ExperimentPlan = field(default_factory=ExperimentPlan)
    forest: rforest.ForestHyperparams = field(default_factory=rforest.ForestHyperparams)
    arima_order: tuple = (2, 1, 0)
    history_len: int = 300
    horizon: float = 7.0
    step: float = 1.0
    demo: DemoSettings = field(default_factory=DemoSettings)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(k, "unknown pipeline configuration section")
        kw = dict(d)
        try:
            if "plan" in kw:
                kw["plan"] = ExperimentPlan(**kw["plan"])
            if "forest" in kw:
                kw["forest"] = rforest.ForestHyperparams(**kw["forest"])
            if "demo" in kw:
                kw["demo"] = DemoSettings(**kw["demo"])
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None
        if "scenario" in kw:
            ScenarioConfig.from_dict(kw["scenario"])  # validate early
        if "arima_order" in kw:
            kw["arima_order"] = tuple(kw["arima_order"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_seed(self, seed: int) -> "PipelineConfig":
        cfg = dataclasses.replace(self, forest=dataclasses.replace(self.forest, seed=seed),
                                  scenario=dict(self.scenario, seed=seed))
        cfg.plan = dataclasses.replace(self.plan, split_seed=seed)
        return cfg

    @property
    def order(self) -> ArimaOrder:
        return ArimaOrder(*self.arima_order)

    def base_scenario(self) -> ScenarioConfig:
        d = {"ntod_load_multiplier": self.plan.ntod_load_multiplier, "duration": self.plan.duration}
        d.update(self.scenario)
        return ScenarioConfig.from_dict(d)

    def scenarios(self):
        base = self.base_scenario()
        for n in self.plan.load_levels:
            for s in range(self.plan.seeds_per_level):
                yield base.replace(n_ntod=int(n), seed=base.seed + s)


class Layout:
    """Where each stage puts its files."""

    def __init__(self, out):
        self.root = Path(out)

    @property
    def traces(self) -> Path:
        return self.root / "traces"

    @property
    def dataset(self) -> Path:
        return self.root / "dataset.csv"

    @property
    def models(self) -> Path:
        return self.root / "models"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def inference(self) -> Path:
        return self.root / "inference"

    @property
    def demo(self) -> Path:
        return self.root / "demo"

    def trace(self, scenario_id: str) -> Path:
        return self.traces / f"{scenario_id}.csv"

    def model(self, name: str) -> Path:
        return self.models / f"{name}.json"

    def ensure(self, path: Path) -> Path:
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create output directory {path}: {exc}") from None
        return path


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def level_of(scenario_id: str) -> int:
    m = _LEVEL_RE.fullmatch(str(scenario_id))
    if not m:
        raise DataError(f"cannot read the load level from scenario id {scenario_id!r}")
    return int(m.group(1))


# --------------------------------------------------------------------------
# simulate


def simulate(cfg: PipelineConfig, layout: Layout, force: bool = False) -> dict:
    """One trace CSV per (level, seed); existing files are kept unless ``force``."""
    layout.ensure(layout.traces)
    new = 0
    paths = []
    for sc in cfg.scenarios():
        sid = default_scenario_id(sc)
        path = layout.trace(sid)
        paths.append(path)
        if path.exists() and manifest_path(path).exists() and not force:
            continue
        log.info("simulating %s", sid)
        run(sc, sid).to_csv(path, sc)
        new += 1
    rows = level_summary([TraceLog.from_csv(p) for p in paths], cfg.plan.load_levels)
    _write_csv(layout.ensure(layout.reports) / "load_levels.csv",
               ["n_ntod", "median_goodput_bps", "mean_goodput_bps", "min_goodput_bps",
                "frac_within_2pct_of_20mbps"], rows)
    return {"simulated": new, "traces": [str(p) for p in paths], "levels": rows}


def level_summary(traces, levels) -> list:
    """Per load level: 3-seed average of the median, pooled mean and min, and the 20 Mbps share."""
    by_level: dict = {}
    for tr in traces:
        by_level.setdefault(tr.n_ntod, []).append(tr)
    rows = []
    for n in levels:
        trs = by_level.get(n, [])
        if not trs:
            continue
        g = np.concatenate([t.tod_goodput for t in trs])
        med = float(np.mean([np.median(t.tod_goodput) for t in trs]))
        share = float(np.mean(np.abs(g - 20e6) <= 0.02 * 20e6))
        rows.append([int(n), _fmt(med), _fmt(g.mean()), _fmt(g.min()), _fmt(share)])
    return rows


def load_traces(cfg: PipelineConfig, layout: Layout) -> list:
    traces = []
    for sc in cfg.scenarios():
        path = layout.trace(default_scenario_id(sc))
        if not path.exists():
            raise DataError(f"missing trace {path}; run the simulate stage first")
        traces.append(TraceLog.from_csv(path))
    return traces


# --------------------------------------------------------------------------
# dataset / training / evaluation


def build(cfg: PipelineConfig, layout: Layout, force: bool = False) -> Path:
    if layout.dataset.exists() and not force:
        return layout.dataset
    topo = build_topology(cfg.base_scenario())
    ds = build_dataset(load_traces(cfg, layout), topo)
    layout.ensure(layout.root)
    ds.to_csv(layout.dataset)
    log.info("dataset: %d samples", len(ds))
    return layout.dataset


def load_dataset(layout: Layout) -> Dataset:
    if not layout.dataset.exists():
        raise DataError(f"missing dataset {layout.dataset}; run build-dataset first")
    return Dataset.from_csv(layout.dataset)


def exclude_levels(ds: Dataset, levels) -> Dataset:
    levels = set(int(v) for v in levels)
    if not levels:
        return ds
    keep = np.array([level_of(s) not in levels for s in ds.scenario_id], dtype=bool)
    return ds.take(np.flatnonzero(keep))


def train(cfg: PipelineConfig, ds: Dataset, fc: FeatureConfig, *, exclude=(), n_jobs: int = 1,
          trained_at: str | None = None):
    """Fit on the training share of ``ds`` (minus ``exclude`` levels); return forest and test share."""
    tr, te = train_split(cfg, exclude_levels(ds, exclude), fc)
    forest = rforest.fit(tr, cfg.forest, fc, n_jobs=n_jobs, trained_at=trained_at)
    forest.training_manifest["excluded_levels"] = sorted(int(v) for v in exclude)
    return forest, te


def train_split(cfg: PipelineConfig, ds: Dataset, fc: FeatureConfig):
    tr, te = split(ds, cfg.plan.train_fraction, cfg.plan.split_seed)
    return apply_config(tr, fc), apply_config(te, fc)


REPORT_HEADER = ["config", "n_features", "mae_bps", "std_abs_err_bps", "mape", "n_test", "n_zero_excluded"]


def evaluate(cfg: PipelineConfig, layout: Layout, n_jobs: int = 1, force: bool = False) -> list:
    """Table of test-share accuracy per feature configuration; models are saved alongside."""
    ds = load_dataset(layout)
    layout.ensure(layout.models)
    layout.ensure(layout.reports)
    rows = []
    for name in cfg.plan.configs:
        fc = FeatureConfig.parse(name)
        path = layout.model(fc.id)
        if path.exists() and not force:
            forest = rforest.Forest.load(path)
            _, te = train_split(cfg, ds, fc)
        else:
            log.info("training %s (%d features)", fc.id, fc.n_features)
            forest, te = train(cfg, ds, fc, n_jobs=n_jobs)
            forest.save(path)
        rep = metrics(te.y, forest.predict(te.X))
        rows.append([fc.id, fc.n_features, _fmt(rep.mae), _fmt(rep.std_abs_err), _fmt(rep.mape),
                     rep.n, rep.n_zero_excluded])
        log.info("%s: MAPE %.4f", fc.id, rep.mape)
    _write_csv(layout.reports / "table1.csv", REPORT_HEADER, rows)
    (layout.reports / "table1.txt").write_text(format_table(rows))
    return rows


def format_table(rows) -> str:
    lines = [f"{'config':<8}{'MAE [Mbps]':>12}{'std |e| [Mbps]':>16}{'MAPE':>9}",
             "-" * 45]
    for r in rows:
        lines.append(f"{r[0]:<8}{float(r[2]) / 1e6:>12.3f}{float(r[3]) / 1e6:>16.3f}{float(r[4]):>9.4f}")
    return "\n".join(lines) + "\n"


def read_report(path) -> dict:
    with open(path, newline="") as fh:
        return {r["config"]: float(r["mape"]) for r in csv.DictReader(fh)}


def check_table(mape: dict) -> list:
    """Failed ordering/quality conditions, as readable strings (empty = all good)."""
    need = {"T1", "T2", "T3", "T4", "T6"}
    if not need <= set(mape):
        return [f"report lacks {sorted(need - set(mape))}"]
    fails = []
    for a, b in (("T1", "T2"), ("T2", "T3"), ("T1", "T4"), ("T4", "T6")):
        if not mape[a] <= mape[b]:
            fails.append(f"MAPE({a})={mape[a]:.4f} > MAPE({b})={mape[b]:.4f}")
    if mape["T1"] > min(mape.values()):
        fails.append("T1 is not the global minimum")
    if mape["T1"] > 0.05:
        fails.append(f"MAPE(T1)={mape['T1']:.4f} exceeds 0.05")
    return fails


# --------------------------------------------------------------------------
# inference experiments


def infer(cfg: PipelineConfig, layout: Layout, *, feature: str = "T1", level: int | None = None,
          seed_index: int = 0, n_jobs: int = 1, force: bool = False) -> dict:
    """Rolling 7 s predictions on one trace, once with the full model and once with the level held out."""
    fc = FeatureConfig.parse(feature)
    level = level if level is not None else (cfg.plan.holdout_levels[0] if cfg.plan.holdout_levels else 80)
    base = cfg.base_scenario()
    sid = default_scenario_id(base.replace(n_ntod=level, seed=base.seed + seed_index))
    tpath = layout.trace(sid)
    if not tpath.exists():
        raise DataError(f"missing trace {tpath}")
    trace = TraceLog.from_csv(tpath)
    known_path = layout.model(fc.id)
    if not known_path.exists():
        raise DataError(f"missing model {known_path}; run evaluate or train first")
    known = rforest.Forest.load(known_path)
    unknown_path = layout.model(f"{fc.id}-without{level:03d}")
    if unknown_path.exists() and not force:
        unknown = rforest.Forest.load(unknown_path)
    else:
        log.info("training %s without level %d", fc.id, level)
        unknown, _ = train(cfg, load_dataset(layout), fc, exclude=[level], n_jobs=n_jobs)
        unknown.save(unknown_path)
    topo = build_topology(base)
    req = PredictionRequest(fc, horizon=cfg.horizon, step=cfg.step)
    out = layout.ensure(layout.inference)
    summary = {"trace": sid, "feature_config": fc.id, "level": level}
    for tag, forest, held in (("known", known, False), ("unknown", unknown, True)):
        eng = InferenceEngine(forest, topo, base.sample_window, cfg.order, cfg.history_len, tag)
        res = rolling_evaluate(trace, eng, req)
        res.to_csv(out / f"{tag}_rolling.csv")
        res.write_step_table(out / f"{tag}_steps.csv")
        summary[tag] = {
            "level_held_out": held,
            "origins": int(len(res.origins)),
            "step_mae_perfect": [float(v) for v in res.step_mae("perfect")],
            "step_mae_arima": [float(v) for v in res.step_mae("arima")],
            "step_mape_perfect": [float(v) for v in res.step_mape("perfect")],
            "step_mape_arima": [float(v) for v in res.step_mape("arima")],
            "horizon_mape_perfect": res.horizon_metrics("perfect").mape,
            "horizon_mape_arima": res.horizon_metrics("arima").mape,
        }
        # exemplar origin for a single-trajectory plot: the one with the lowest true minimum
        ex = int(np.argmin(res.truth.min(axis=1)))
        _write_csv(out / f"{tag}_exemplar.csv",
                   ["origin_t_s", "step_k", "true_bps", "pred_perfect_bps", "pred_arima_bps", "spread_bps"],
                   [[_fmt(res.origins[ex]), k + 1, _fmt(res.truth[ex, k]),
                     _fmt(res.predictions["perfect"][ex, k]), _fmt(res.predictions["arima"][ex, k]),
                     _fmt(res.spreads["perfect"][ex, k])] for k in range(res.n_steps)])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# --------------------------------------------------------------------------
# end-to-end demo


def demo_scenario(cfg: PipelineConfig) -> ScenarioConfig:
    d = cfg.demo
    return cfg.base_scenario().replace(
        n_ntod=d.n_ntod, duration=d.duration, seed=d.seed, ntod_load_multiplier=d.base_multiplier,
        load_schedule=[[d.surge_at, d.surge_multiplier]] if d.surge_multiplier != d.base_multiplier else [])


NOTIFY_HEADER = ["issued_at_s", "sub_id", "threshold_bps", "direction", "predicted_crossing_at_s",
                 "predicted_value_bps", "spread_bps"]


def demo(cfg: PipelineConfig, layout: Layout, *, model: str = "T1", out_dir: Path | None = None) -> dict:
    """Replay a scripted load surge through the sustainability service and the ToD application."""
    d = cfg.demo
    path = layout.model(model)
    if not path.exists():
        raise DataError(f"missing model {path}; run evaluate or train first")
    forest = rforest.Forest.load(path)
    sc = demo_scenario(cfg)
    trace = run(sc, f"demo-ntod{d.n_ntod:03d}-seed{d.seed}")
    out = layout.ensure(out_dir or layout.demo)
    trace.to_csv(out / "trace.csv", sc)
    engine = InferenceEngine(forest, build_topology(sc), sc.sample_window, cfg.order, cfg.history_len, model)
    req = PredictionRequest(forest.feature_config, horizon=cfg.horizon, step=cfg.step, input_mode=d.input_mode)
    replay = TraceReplay(trace, engine, req)
    service = SustainService(replay, SubscriptionRegistry())
    sub_id = service.registry.subscribe({
        "area": {"center": [0.0, 0.0], "radius": 1e6}, "thresholds": [d.threshold_bps],
        "time_window": [0.0, sc.duration], "mode": "continuous"}, request_id="demo")
    state = AppState(d.start, d.speed_mps, LIMITED)
    policy = AdaptationPolicy()
    dlog = DecisionLog()
    notes = []
    downgrades = []
    now = d.start
    t_end = replay.last_time
    while now <= t_end + 1e-9:
        snap = replay(now)
        cycle = service.cycle(now)
        notes.extend(cycle)
        state = dataclasses.replace(state, t=now)
        before = state.config
        decision, state = decide(state, snap.series, policy)
        if decision.action == "switch_config" and decision.target.rate_bps < before.rate_bps:
            downgrades.append(now)
        dlog.record(decision, state.speed)
        now = round(now + 1.0, 9)
    _write_csv(out / "notifications.csv", NOTIFY_HEADER,
               [[_fmt(n.issued_at), n.sub_id, _fmt(n.threshold), n.direction, _fmt(n.predicted_crossing_at),
                 _fmt(n.predicted_value), _fmt(n.spread)] for n in notes])
    dlog.to_csv(out / "decisions.csv")
    below = np.flatnonzero((trace.tod_goodput < d.threshold_bps) & (trace.t >= d.start))
    first_dip = float(trace.t[below[0]]) if below.size else None
    summary = {"subscription": sub_id, "notifications": len(notes),
               "first_below_notification_s": next((n.issued_at for n in notes if n.direction == "below"), None),
               "first_actual_dip_s": first_dip,
               "decisions": {a: sum(1 for r in dlog.rows if r[3] == a)
                             for a in ("keep", "switch_config", "reduce_speed", "safe_stop")},
               "first_downgrade_s": downgrades[0] if downgrades else None,
               "max_safe_stop_decel": max((r[5] for r in dlog.rows if r[3] == "safe_stop"), default=None)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def write_manifest(cfg: PipelineConfig, layout: Layout) -> Path:
    """Top-level record of the configuration and the hash of every produced file."""
    files = {}
    for p in sorted(layout.root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(layout.root))] = file_sha256(p)
    blob = {"config": cfg.to_dict(), "files": files, "features": list(STATIC_FEATURES)}
    path = layout.root / "manifest.json"
    path.write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")
    return path
