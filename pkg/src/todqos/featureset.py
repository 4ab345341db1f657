"""Feature extraction, datasets, feature-configuration presets and accuracy metrics."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from todqos.errors import DataError, SchemaError
from todqos.simkit.config import ScenarioConfig
from todqos.simkit.geometry import Topology, build_topology

NUM_CELLS = 9
STATIC_FEATURES = (
    ["pos_x_m", "pos_y_m", "tod_dist_m"]
    + [f"v_c{i}" for i in range(NUM_CELLS)]
    + [f"d_c{i}" for i in range(NUM_CELLS)]
    + ["ntod_dist_recip"]
)
COUNT_FEATURES = tuple(f"v_c{i}" for i in range(NUM_CELLS))
DEMAND_FEATURES = tuple(f"d_c{i}" for i in range(NUM_CELLS))
POSITION_FEATURES = ("pos_x_m", "pos_y_m", "tod_dist_m")
DYNAMIC_INPUTS = COUNT_FEATURES + DEMAND_FEATURES + ("ntod_dist_recip",)

_IDX = {name: i for i, name in enumerate(STATIC_FEATURES)}


@dataclass(frozen=True)
class FeatureVector:
    pos_x: float
    pos_y: float
    tod_dist: float
    v_c: tuple
    d_c: tuple
    ntod_dist_recip: float

    def to_array(self) -> np.ndarray:
        return np.array([self.pos_x, self.pos_y, self.tod_dist, *self.v_c, *self.d_c,
                         self.ntod_dist_recip], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "FeatureVector":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (len(STATIC_FEATURES),):
            raise SchemaError(f"feature vector needs {len(STATIC_FEATURES)} entries, got {arr.shape}")
        return cls(float(arr[0]), float(arr[1]), float(arr[2]),
                   tuple(float(v) for v in arr[3:12]), tuple(float(v) for v in arr[12:21]),
                   float(arr[21]))


@dataclass(frozen=True)
class Sample:
    t: float
    features: FeatureVector
    label: float
    scenario_id: str


@dataclass(frozen=True)
class FeatureConfig:
    """Named selection of input columns (kept in canonical feature order)."""

    id: str
    columns: tuple

    def __post_init__(self):
        if not self.columns:
            raise SchemaError("feature config selects no features")
        bad = [c for c in self.columns if c not in _IDX]
        if bad:
            raise SchemaError(f"unknown feature(s): {bad}")
        object.__setattr__(self, "columns", tuple(sorted(set(self.columns), key=_IDX.get)))

    @property
    def mask(self) -> list[bool]:
        return [name in self.columns for name in STATIC_FEATURES]

    @property
    def n_features(self) -> int:
        return len(self.columns)

    @classmethod
    def from_mask(cls, mask, id: str = "custom") -> "FeatureConfig":
        mask = [bool(m) for m in mask]
        if len(mask) != len(STATIC_FEATURES):
            raise SchemaError(f"mask needs {len(STATIC_FEATURES)} flags, got {len(mask)}")
        if not any(mask):
            raise SchemaError("mask selects no features")
        return cls(id, tuple(n for n, m in zip(STATIC_FEATURES, mask) if m))

    @classmethod
    def preset(cls, name: str) -> "FeatureConfig":
        try:
            return PRESETS[name]
        except KeyError:
            raise SchemaError(f"unknown feature preset {name!r}") from None

    @classmethod
    def parse(cls, text: str) -> "FeatureConfig":
        """Preset name (``T1``..``T6``) or a JSON array of 22 mask flags."""
        text = text.strip()
        if text.startswith("["):
            return cls.from_mask(json.loads(text))
        return cls.preset(text)

    def to_dict(self) -> dict:
        return {"id": self.id, "columns": list(self.columns)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(d["id"], tuple(d["columns"]))


PRESETS = {
    "T1": FeatureConfig("T1", tuple(STATIC_FEATURES)),
    "T2": FeatureConfig("T2", POSITION_FEATURES + ("v_c0", "d_c0")),
    "T3": FeatureConfig("T3", POSITION_FEATURES),
    "T4": FeatureConfig("T4", COUNT_FEATURES + DEMAND_FEATURES + ("ntod_dist_recip",)),
    "T5": FeatureConfig("T5", COUNT_FEATURES + DEMAND_FEATURES),
    "T6": FeatureConfig("T6", ("v_c0", "d_c0")),
}


@dataclass(frozen=True)
class AccuracyReport:
    mae: float
    std_abs_err: float
    mape: float
    n: int
    n_zero_excluded: int = 0


@dataclass
class Dataset:
    """Labeled samples as column arrays.

    ``X`` holds the columns named in ``columns``; a freshly built dataset has
    the 22 static features.
    """

    X: np.ndarray
    y: np.ndarray
    t: np.ndarray
    serving_cell: np.ndarray
    scenario_id: np.ndarray
    columns: tuple = tuple(STATIC_FEATURES)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], self.t[idx], self.serving_cell[idx],
                       self.scenario_id[idx], self.columns, dict(self.meta))

    def samples(self):
        if self.columns != tuple(STATIC_FEATURES):
            raise SchemaError("samples() needs the full 22-feature layout")
        for i in range(len(self)):
            yield Sample(float(self.t[i]), FeatureVector.from_array(self.X[i]), float(self.y[i]),
                         str(self.scenario_id[i]))

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.columns.index(name)]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(list(self.columns)).encode())
        h.update(np.ascontiguousarray(self.X, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.y, dtype=np.float64).tobytes())
        return h.hexdigest()

    @classmethod
    def empty(cls) -> "Dataset":
        return cls(np.zeros((0, len(STATIC_FEATURES))), np.zeros(0), np.zeros(0),
                   np.zeros(0, dtype=np.int64), np.zeros(0, dtype=object))

    # -- persistence -----------------------------------------------------
    def to_csv(self, path) -> None:
        if self.columns != tuple(STATIC_FEATURES):
            raise SchemaError("only full-feature datasets are persisted")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DATASET_HEADER)
            for i in range(len(self)):
                row = self.X[i]
                w.writerow([repr(float(self.t[i])), self.scenario_id[i],
                            *[repr(float(v)) for v in row[:3]],
                            *[int(v) for v in row[3:12]],
                            *[repr(float(v)) for v in row[12:]],
                            repr(float(self.y[i])), int(self.serving_cell[i])])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != DATASET_HEADER:
                raise SchemaError(f"{path}: unexpected dataset header")
            rows = list(reader)
        if not rows:
            return cls.empty()
        sid = np.array([r[1] for r in rows], dtype=object)
        num = np.array([[r[0]] + r[2:] for r in rows], dtype=float)
        return cls(num[:, 1:23].copy(), num[:, 23].copy(), num[:, 0].copy(),
                   num[:, 24].astype(np.int64), sid)


DATASET_HEADER = (["t_s", "scenario_id"] + list(STATIC_FEATURES) + ["label_bps", "serving_cell"])


def _check_cells(num_cells: int, topology: Topology):
    if num_cells != topology.num_cells or num_cells != NUM_CELLS:
        raise SchemaError(f"trace has {num_cells} cells, topology has {topology.num_cells}, "
                          f"feature layout needs {NUM_CELLS}")


def cell_order(topology: Topology) -> np.ndarray:
    """Per serving cell, the order in which per-cell features are laid out.

    Row ``s`` starts with ``s`` itself, then the other sectors of its site
    (next sector first), then the cells of the remaining sites by site
    distance (ties by site id), each site in sector order.
    """
    C = topology.num_cells
    sites = topology.site_positions
    cell_site = topology.cell_site
    sector = np.array([c.sector_index for c in topology.cells])
    n_sec = int(sector.max()) + 1
    table = np.empty((C, C), dtype=np.int64)
    for s in range(C):
        home = cell_site[s]
        own = sorted((c for c in range(C) if cell_site[c] == home),
                     key=lambda c: (sector[c] - sector[s]) % n_sec)
        dist = np.hypot(*(sites - sites[home]).T)
        others = sorted((c for c in range(C) if cell_site[c] != home),
                        key=lambda c: (dist[cell_site[c]], cell_site[c], sector[c]))
        table[s] = own + others
    return table


def extract_features(window, topology: Topology) -> FeatureVector:
    """Feature vector of one trace window (a :class:`WindowRecord`).

    Per-cell counts and demands are reordered relative to the ToD's serving
    cell, so ``v_c0``/``d_c0`` always describe the ToD's own cell.
    """
    counts = np.asarray(window.counts)
    _check_cells(len(counts), topology)
    serving = int(window.tod_serving_cell)
    order = cell_order(topology)[serving]
    site = topology.site_of(serving)
    x, y = window.tod_position
    dist = math.hypot(x - site[0], y - site[1])
    recip = 1.0 / window.ntod_dist_sum if window.ntod_dist_sum > 0 else 0.0
    demand = np.asarray(window.demand)
    return FeatureVector(float(x), float(y), dist, tuple(float(counts[c]) for c in order),
                         tuple(float(demand[c]) for c in order), recip)


def assemble_features(positions, serving, counts, demand, ntod_dist_sum, topology: Topology) -> np.ndarray:
    """Feature matrix from per-window arrays in absolute cell order.

    ``counts``/``demand`` are (W, C) indexed by cell id; the result lays them
    out relative to each window's serving cell.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    counts = np.asarray(counts, dtype=float)
    _check_cells(counts.shape[1], topology)
    W = len(positions)
    X = np.empty((W, len(STATIC_FEATURES)))
    if W == 0:
        return X
    serving = np.asarray(serving, dtype=np.int64)
    order = cell_order(topology)[serving]
    rows = np.arange(W)[:, None]
    sites = topology.site_positions[topology.cell_site[serving]]
    X[:, 0:2] = positions
    X[:, 2] = np.hypot(positions[:, 0] - sites[:, 0], positions[:, 1] - sites[:, 1])
    X[:, 3:12] = counts[rows, order]
    X[:, 12:21] = np.asarray(demand, dtype=float)[rows, order]
    dsum = np.asarray(ntod_dist_sum, dtype=float)
    X[:, 21] = np.divide(1.0, dsum, out=np.zeros(W), where=dsum > 0)
    return X


def trace_features(trace, topology: Topology) -> np.ndarray:
    """Vectorized :func:`extract_features` over every window of a trace."""
    _check_cells(trace.num_cells, topology)
    return assemble_features(trace.tod_pos, trace.serving_cell, trace.counts, trace.demand,
                             trace.ntod_dist_sum, topology)


def build_dataset(traces, topology: Topology | None = None) -> Dataset:
    """One sample per trace window, concatenated in trace order."""
    traces = list(traces)
    if not traces:
        return Dataset.empty()
    ncells = {tr.num_cells for tr in traces}
    if len(ncells) != 1:
        raise SchemaError(f"traces mix cell layouts: {sorted(ncells)}")
    topology = topology or build_topology(ScenarioConfig())
    parts_X, parts_y, parts_t, parts_s, parts_id = [], [], [], [], []
    for tr in traces:
        parts_X.append(trace_features(tr, topology))
        parts_y.append(np.asarray(tr.tod_goodput, dtype=float))
        parts_t.append(np.asarray(tr.t, dtype=float))
        parts_s.append(np.asarray(tr.serving_cell, dtype=np.int64))
        parts_id.append(np.full(len(tr), tr.scenario_id, dtype=object))
    return Dataset(np.concatenate(parts_X), np.concatenate(parts_y), np.concatenate(parts_t),
                   np.concatenate(parts_s), np.concatenate(parts_id))


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``round(n * train_fraction)`` rows train."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(n * train_fraction))
    return dataset.take(np.sort(perm[:k])), dataset.take(np.sort(perm[k:]))


def resolve_columns(dataset: Dataset, columns) -> np.ndarray:
    missing = [c for c in columns if c not in dataset.columns]
    if missing:
        raise SchemaError(f"columns {missing} not available in dataset")
    return dataset.X[:, [dataset.columns.index(c) for c in columns]]


def apply_config(dataset: Dataset, config: FeatureConfig) -> Dataset:
    """Project every sample onto the configured columns; labels untouched."""
    X = resolve_columns(dataset, config.columns)
    meta = dict(dataset.meta, feature_config=config.id)
    return Dataset(X, dataset.y, dataset.t, dataset.serving_cell, dataset.scenario_id,
                   tuple(config.columns), meta)


def metrics(true_labels, predictions) -> AccuracyReport:
    """MAE, sample std of absolute error, and MAPE (zero true labels skipped)."""
    y = np.asarray(true_labels, dtype=float)
    p = np.asarray(predictions, dtype=float)
    if y.shape != p.shape:
        raise DataError(f"length mismatch: {y.shape} vs {p.shape}")
    if y.size == 0:
        raise DataError("metrics need at least one sample")
    err = np.abs(p - y)
    std = float(np.std(err, ddof=1)) if y.size > 1 else 0.0
    nz = y != 0
    mape = float(np.mean(err[nz] / np.abs(y[nz]))) if nz.any() else float("nan")
    return AccuracyReport(float(err.mean()), std, mape, int(y.size), int((~nz).sum()))
