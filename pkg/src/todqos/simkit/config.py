"""Scenario configuration for the uplink simulator."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from todqos.errors import ConfigError

_POSITIVE = (
    "block_size", "isd", "carrier_freq", "bandwidth", "scheduler_tick",
    "sample_window", "duration", "tod_offered_rate", "ntod_mean_interarrival",
    "ntod_packet_size", "ntod_load_multiplier", "mean_speed", "n_los", "n_nlos",
    "road_width", "beamwidth_3db", "se_cap", "overhead",
)


@dataclass
class ScenarioConfig:
    """World description for one simulation run.

    Units: distances in meters, frequencies in MHz, powers in dBm/dB, times in
    seconds, rates in bits/s.
    """

    grid_blocks: tuple[int, int] = (12, 4)
    block_size: float = 125.0
    num_sites: int = 3
    sectors_per_site: int = 3
    isd: float = 500.0
    carrier_freq: float = 2160.0
    bandwidth: float = 20.0
    num_prbs: int = 100
    ue_tx_power: float = 23.0
    noise_figure: float = 5.0
    scheduler_tick: float = 0.01
    sample_window: float = 0.1
    duration: float = 600.0
    seed: int = 0
    n_ntod: int = 0
    tod_offered_rate: float = 2.0e7
    ntod_mean_interarrival: float = 1.0
    ntod_packet_size: float = 1012.0
    ntod_load_multiplier: float = 1.0
    mean_speed: float = 13.9
    # propagation / radio model knobs
    n_los: float = 2.2
    n_nlos: float = 3.8
    shadowing_std: float = 4.0
    road_width: float = 20.0
    antenna_max_gain: float = 14.0
    beamwidth_3db: float = 70.0
    front_to_back: float = 20.0
    se_cap: float = 4.8
    overhead: float = 0.9
    handover_hysteresis: float = 3.0
    # optional [t_start, multiplier] pairs overriding ntod_load_multiplier from t_start on
    load_schedule: list = field(default_factory=list)

    def __post_init__(self):
        self.grid_blocks = tuple(int(v) for v in self.grid_blocks)
        self.load_schedule = [[float(t), float(m)] for t, m in self.load_schedule]
        self.validate()

    def validate(self) -> None:
        if len(self.grid_blocks) != 2 or min(self.grid_blocks) < 1:
            raise ConfigError("grid_blocks", "needs two positive block counts")
        for name in _POSITIVE:
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(name, f"must be strictly positive, got {value!r}")
        for name in ("num_sites", "sectors_per_site", "num_prbs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.n_ntod < 0:
            raise ConfigError("n_ntod", "must be >= 0")
        if self.shadowing_std < 0:
            raise ConfigError("shadowing_std", "must be >= 0")
        if self.front_to_back < 0:
            raise ConfigError("front_to_back", "must be >= 0")
        ratio = self.sample_window / self.scheduler_tick
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("sample_window", "must be an integer multiple of scheduler_tick")
        n_win = self.duration / self.sample_window
        if abs(n_win - round(n_win)) > 1e-9 or round(n_win) < 1:
            raise ConfigError("duration", "must be an integer multiple of sample_window")
        width = self.grid_blocks[0] * self.block_size
        if (self.num_sites - 1) * self.isd > width:
            raise ConfigError("isd", "sites do not fit inside the road grid")
        for t, m in self.load_schedule:
            if t < 0 or m <= 0:
                raise ConfigError("load_schedule", "entries need t >= 0 and multiplier > 0")

    # derived quantities
    @property
    def ticks_per_window(self) -> int:
        return int(round(self.sample_window / self.scheduler_tick))

    @property
    def n_windows(self) -> int:
        return int(round(self.duration / self.sample_window))

    @property
    def num_cells(self) -> int:
        return self.num_sites * self.sectors_per_site

    @property
    def prb_bandwidth_hz(self) -> float:
        return self.bandwidth * 1e6 / self.num_prbs

    @property
    def noise_floor_dbm(self) -> float:
        """Thermal noise plus noise figure over one PRB."""
        return -174.0 + 10.0 * math.log10(self.prb_bandwidth_hz) + self.noise_figure

    def multiplier_at(self, t: float) -> float:
        m = self.ntod_load_multiplier
        for start, value in sorted(self.load_schedule):
            if t >= start:
                m = value
        return m

    # persistence
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid_blocks"] = list(self.grid_blocks)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration field")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)
