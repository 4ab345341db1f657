"""Per-window trace of a simulation run and its CSV persistence."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from todqos.errors import SchemaError
from todqos.simkit.config import ScenarioConfig
from todqos.simkit.engine import WindowRecord, build_scenario

log = logging.getLogger(__name__)


@dataclass
class TraceLog:
    scenario_id: str
    config_hash: str
    t: np.ndarray  # (W,)
    tod_pos: np.ndarray  # (W, 2)
    serving_cell: np.ndarray  # (W,)
    counts: np.ndarray  # (W, C)
    demand: np.ndarray  # (W, C) NToD offered bits/s
    tod_goodput: np.ndarray  # (W,)
    tod_sinr: np.ndarray  # (W,)
    ntod_dist_sum: np.ndarray  # (W,)
    n_ntod: int = -1

    def __len__(self) -> int:
        return len(self.t)

    @property
    def num_cells(self) -> int:
        return self.counts.shape[1]

    @property
    def sample_window(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else float("nan")

    def window(self, i: int) -> WindowRecord:
        return WindowRecord(float(self.t[i]), (float(self.tod_pos[i, 0]), float(self.tod_pos[i, 1])),
                            int(self.serving_cell[i]), self.counts[i], self.demand[i],
                            float(self.tod_goodput[i]), float(self.tod_sinr[i]),
                            float(self.ntod_dist_sum[i]))

    def slice(self, start: int, stop: int) -> "TraceLog":
        sl = slice(start, stop)
        return TraceLog(self.scenario_id, self.config_hash, self.t[sl], self.tod_pos[sl],
                        self.serving_cell[sl], self.counts[sl], self.demand[sl],
                        self.tod_goodput[sl], self.tod_sinr[sl], self.ntod_dist_sum[sl],
                        self.n_ntod)

    @classmethod
    def from_records(cls, scenario_id: str, config_hash: str, records: list[WindowRecord],
                     num_cells: int, n_ntod: int = -1) -> "TraceLog":
        if not records:
            z = np.zeros(0)
            return cls(scenario_id, config_hash, z, np.zeros((0, 2)), np.zeros(0, dtype=np.int64),
                       np.zeros((0, num_cells), dtype=np.int64), np.zeros((0, num_cells)),
                       z, z, z, n_ntod)
        return cls(
            scenario_id, config_hash,
            np.array([r.t for r in records]),
            np.array([r.tod_position for r in records], dtype=float),
            np.array([r.tod_serving_cell for r in records], dtype=np.int64),
            np.array([r.counts for r in records], dtype=np.int64),
            np.array([r.demand for r in records], dtype=float),
            np.array([r.tod_goodput for r in records]),
            np.array([r.tod_sinr for r in records]),
            np.array([r.ntod_dist_sum for r in records]),
            n_ntod,
        )

    # -- persistence -----------------------------------------------------
    def header(self) -> list[str]:
        c = range(self.num_cells)
        return (["t_s", "pos_x_m", "pos_y_m", "serving_cell"] + [f"v_c{i}" for i in c]
                + [f"d_c{i}" for i in c] + ["tod_goodput_bps", "tod_sinr_db", "ntod_dist_sum_m"])

    def to_csv(self, path, config: ScenarioConfig | None = None) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for i in range(len(self)):
                w.writerow(
                    [_fmt(self.t[i]), _fmt(self.tod_pos[i, 0]), _fmt(self.tod_pos[i, 1]),
                     int(self.serving_cell[i])]
                    + [int(v) for v in self.counts[i]]
                    + [_fmt(d) for d in self.demand[i]]
                    + [_fmt(self.tod_goodput[i]), _fmt(self.tod_sinr[i]), _fmt(self.ntod_dist_sum[i])]
                )
        manifest = {"scenario_id": self.scenario_id, "config_hash": self.config_hash,
                    "n_ntod": self.n_ntod, "windows": len(self)}
        if config is not None:
            manifest["config"] = config.to_dict()
        manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path) -> "TraceLog":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise SchemaError(f"{path}: empty trace file")
        header, body = rows[0], rows[1:]
        ncell = sum(1 for h in header if h.startswith("v_c"))
        expected = cls.header_for(ncell)
        if header != expected:
            raise SchemaError(f"{path}: unexpected trace header")
        data = np.array(body, dtype=float).reshape(len(body), len(header))
        mp = manifest_path(path)
        meta = json.loads(mp.read_text()) if mp.exists() else {}
        return cls(
            meta.get("scenario_id", path.stem), meta.get("config_hash", ""),
            data[:, 0], data[:, 1:3], data[:, 3].astype(np.int64),
            data[:, 4:4 + ncell].astype(np.int64), data[:, 4 + ncell:4 + 2 * ncell],
            data[:, 4 + 2 * ncell], data[:, 5 + 2 * ncell], data[:, 6 + 2 * ncell],
            int(meta.get("n_ntod", -1)),
        )

    @staticmethod
    def header_for(num_cells: int) -> list[str]:
        c = range(num_cells)
        return (["t_s", "pos_x_m", "pos_y_m", "serving_cell"] + [f"v_c{i}" for i in c]
                + [f"d_c{i}" for i in c] + ["tod_goodput_bps", "tod_sinr_db", "ntod_dist_sum_m"])


def manifest_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".manifest.json")


def _fmt(x) -> str:
    return repr(float(x))


def default_scenario_id(config: ScenarioConfig) -> str:
    return f"ntod{config.n_ntod:03d}-seed{config.seed}"


def run(config: ScenarioConfig, scenario_id: str | None = None) -> TraceLog:
    """Simulate ``config.duration`` seconds and aggregate per sample window."""
    world = build_scenario(config)
    total = int(round(config.duration / config.scheduler_tick))
    records = world.advance(total)
    sid = scenario_id or default_scenario_id(config)
    log.debug("run %s: %d windows", sid, len(records))
    return TraceLog.from_records(sid, config.config_hash(), records,
                                 world.topology.num_cells, config.n_ntod)
