"""Tick-driven uplink simulator.

Vehicle 0 is always the ToD vehicle; vehicles 1..n_ntod generate background
(NToD) traffic. Per-tick work runs in a numba kernel; randomness is drawn in
Python from per-stream generators so that stepping one tick at a time and
advancing a whole window at once consume identical random sequences.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from todqos.simkit.config import ScenarioConfig
from todqos.simkit.geometry import (
    Topology,
    antenna_gain_db,
    build_topology,
    free_space_loss_1m,
    los_flag,
    path_loss_db,
)
from todqos.simkit.radio import rr_shares, spectral_efficiency

log = logging.getLogger(__name__)

TOD_ID = 0
HEADING_DEG = (0.0, 90.0, 180.0, 270.0)


@dataclass(frozen=True)
class Vehicle:
    vehicle_id: int
    kind: str  # "ToD" or "NToD"
    position: tuple[float, float]
    speed: float
    heading: float
    serving_cell: int
    backlog: float  # bytes


@dataclass
class WindowRecord:
    t: float
    tod_position: tuple[float, float]
    tod_serving_cell: int
    counts: np.ndarray
    demand: np.ndarray
    tod_goodput: float
    tod_sinr: float
    ntod_dist_sum: float


# --------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _refresh_links(pos, shadow, serving, site_xy, cell_site, cell_az, tx_power, pl0,
                   n_los, n_nlos, block, road_width, max_gain, beamwidth, ftb,
                   hysteresis, rx_dbm):
    n = pos.shape[0]
    ncell = cell_site.shape[0]
    for v in range(n):
        best = 0
        for c in range(ncell):
            s = cell_site[c]
            dx = pos[v, 0] - site_xy[s, 0]
            dy = pos[v, 1] - site_xy[s, 1]
            los = los_flag(pos[v, 0], pos[v, 1], site_xy[s, 0], site_xy[s, 1], block, road_width)
            g = antenna_gain_db(dx, dy, cell_az[c], max_gain, beamwidth, ftb)
            pl = path_loss_db(math.sqrt(dx * dx + dy * dy), los, pl0, n_los, n_nlos)
            rx_dbm[v, c] = tx_power + g - pl + shadow[v, s]
            if rx_dbm[v, c] > rx_dbm[v, best]:
                best = c
        cur = serving[v]
        if cur < 0 or rx_dbm[v, best] > rx_dbm[v, cur] + hysteresis:
            serving[v] = best


@njit(cache=True)
def _move(v, pos, heading, dist, u, block, nx, ny):
    left = dist
    while left > 1e-12:
        h = heading[v]
        horizontal = h == 0 or h == 2
        coord = pos[v, 0] if horizontal else pos[v, 1]
        if h == 0 or h == 1:
            nxt = (math.floor(coord / block) + 1.0) * block
            gap = nxt - coord
        else:
            nxt = (math.ceil(coord / block) - 1.0) * block
            gap = coord - nxt
        if gap > left:
            step = left if (h == 0 or h == 1) else -left
            if horizontal:
                pos[v, 0] += step
            else:
                pos[v, 1] += step
            return
        if horizontal:
            pos[v, 0] = nxt
        else:
            pos[v, 1] = nxt
        left -= gap
        ix = int(round(pos[v, 0] / block))
        iy = int(round(pos[v, 1] / block))
        rev = (h + 2) % 4
        opts = np.empty(4, dtype=np.int64)
        k = 0
        for d in range(4):
            if d == rev:
                continue
            if d == 0 and ix >= nx:
                continue
            if d == 2 and ix <= 0:
                continue
            if d == 1 and iy >= ny:
                continue
            if d == 3 and iy <= 0:
                continue
            opts[k] = d
            k += 1
        if k == 0:
            heading[v] = rev
        else:
            j = int(u * k)
            if j >= k:
                j = k - 1
            heading[v] = opts[j]
            u = u * k - j


@njit(cache=True)
def _run_ticks(pos, heading, speed, serving, backlog, cursor, rx_dbm, arrivals, u_turn,
               tod_bits_per_tick, packet_bits, num_prbs, noise_dbm, rate_coef, se_cap,
               dt, block, nx, ny, acc_tod, acc_arrived):
    n = pos.shape[0]
    ncell = rx_dbm.shape[1]
    rx_lin = np.empty_like(rx_dbm)
    for v in range(n):
        for c in range(ncell):
            rx_lin[v, c] = 10.0 ** (rx_dbm[v, c] / 10.0)
    noise = 10.0 ** (noise_dbm / 10.0)
    occupant = np.empty((ncell, num_prbs), dtype=np.int64)
    members = np.empty(n, dtype=np.int64)
    shares = np.empty(n, dtype=np.int64)
    a_start = np.empty(n, dtype=np.int64)
    a_len = np.empty(n, dtype=np.int64)
    for t in range(arrivals.shape[0]):
        # traffic arrivals
        backlog[0] += tod_bits_per_tick
        for v in range(1, n):
            if arrivals[t, v] > 0:
                b = arrivals[t, v] * packet_bits
                backlog[v] += b
                acc_arrived[serving[v]] += b
        # per-sector round robin
        occupant[:, :] = -1
        a_len[:] = 0
        for c in range(ncell):
            k = 0
            for v in range(n):
                if serving[v] == c and backlog[v] > 0.0:
                    members[k] = v
                    k += 1
            if k > 0:
                rr_shares(k, num_prbs, cursor[c], shares)
                off = 0
                for j in range(k):
                    v = members[j]
                    # link adaptation on the UE's own SNR: transmit only on the
                    # PRBs needed to drain the backlog
                    per_prb = rate_coef * spectral_efficiency(rx_lin[v, c] / noise, se_cap)
                    need = int(math.ceil(backlog[v] / per_prb)) if per_prb > 0.0 else shares[j]
                    a_start[v] = off
                    a_len[v] = min(shares[j], need)
                    for p in range(off, off + a_len[v]):
                        occupant[c, p] = v
                    off += shares[j]
            cursor[c] += 1
        # rate map and backlog drain
        for v in range(n):
            if a_len[v] == 0:
                continue
            c = serving[v]
            sig = rx_lin[v, c]
            bits = 0.0
            for p in range(a_start[v], a_start[v] + a_len[v]):
                interf = 0.0
                for c2 in range(ncell):
                    if c2 != c:
                        o = occupant[c2, p]
                        if o >= 0:
                            interf += rx_lin[o, c]
                s = sig / (noise + interf)
                bits += rate_coef * spectral_efficiency(s, se_cap)
                if v == 0:
                    acc_tod[1] += s
                    acc_tod[2] += 1.0
            served = bits if bits < backlog[v] else backlog[v]
            backlog[v] -= served
            if v == 0:
                acc_tod[0] += served
        # mobility
        for v in range(n):
            _move(v, pos, heading, speed[v] * dt, u_turn[t, v], block, nx, ny)


# --------------------------------------------------------------------------


class World:
    """Mutable simulation state. Create with :func:`build_scenario`."""

    def __init__(self, config: ScenarioConfig, topology: Topology):
        self.config = config
        self.topology = topology
        self.tick = 0
        n = config.n_ntod + 1
        self.n = n
        ss = np.random.SeedSequence(config.seed)
        place, mob, traffic, shadow = ss.spawn(4)
        self.rng_place = np.random.default_rng(place)
        self.rng_mobility = np.random.default_rng(mob)
        self.rng_traffic = np.random.default_rng(traffic)
        self.rng_shadow = np.random.default_rng(shadow)
        self.pos = np.zeros((n, 2))
        self.heading = np.zeros(n, dtype=np.int64)
        self.speed = np.zeros(n)
        self.serving = np.full(n, -1, dtype=np.int64)
        self.backlog = np.zeros(n)
        self.cursor = np.zeros(topology.num_cells, dtype=np.int64)
        self.shadow = np.zeros((n, len(topology.site_positions)))
        self.rx_dbm = np.zeros((n, topology.num_cells))
        self.acc_tod = np.zeros(3)
        self.acc_arrived = np.zeros(topology.num_cells)
        self._snapshot = None

    # -- inspection --------------------------------------------------------
    def vehicles(self) -> list[Vehicle]:
        return [
            Vehicle(v, "ToD" if v == TOD_ID else "NToD",
                    (float(self.pos[v, 0]), float(self.pos[v, 1])), float(self.speed[v]),
                    HEADING_DEG[self.heading[v]], int(self.serving[v]), float(self.backlog[v]) / 8.0)
            for v in range(self.n)
        ]

    def state_bytes(self) -> bytes:
        parts = [np.int64(self.tick).tobytes()]
        for arr in (self.pos, self.heading, self.speed, self.serving, self.backlog,
                    self.cursor, self.shadow, self.rx_dbm, self.acc_tod, self.acc_arrived):
            parts.append(np.ascontiguousarray(arr).tobytes())
        return b"".join(parts)

    def copy(self) -> "World":
        return copy.deepcopy(self)

    def cell_counts(self) -> np.ndarray:
        return np.bincount(self.serving, minlength=self.topology.num_cells)

    @property
    def time(self) -> float:
        return self.tick * self.config.scheduler_tick

    # -- link refresh --------------------------------------------------------
    def _link_args(self):
        cfg = self.config
        topo = self.topology
        return (topo.site_positions, topo.cell_site, topo.cell_azimuth, cfg.ue_tx_power,
                free_space_loss_1m(cfg.carrier_freq), cfg.n_los, cfg.n_nlos,
                topo.grid.block_size, topo.grid.road_width, cfg.antenna_max_gain,
                cfg.beamwidth_3db, cfg.front_to_back, cfg.handover_hysteresis)

    def _draw_shadow(self):
        cfg = self.config
        self.shadow = cfg.shadowing_std * self.rng_shadow.standard_normal(self.shadow.shape)

    def refresh_links(self):
        _refresh_links(self.pos, self.shadow, self.serving, *self._link_args(), self.rx_dbm)

    def _begin_window(self):
        if self.tick > 0:
            self._draw_shadow()
            self.refresh_links()
        self.backlog[TOD_ID] = 0.0  # undelivered video is stale
        self.acc_tod[:] = 0.0
        self.acc_arrived[:] = 0.0
        serving = int(self.serving[TOD_ID])
        self._snapshot = (
            self.time,
            (float(self.pos[TOD_ID, 0]), float(self.pos[TOD_ID, 1])),
            serving,
            self.cell_counts(),
            ntod_distance_sum(self.pos, self.serving, self.topology),
        )

    def _end_window(self) -> WindowRecord:
        t, tod_pos, serving, counts, dist_sum = self._snapshot
        w = self.config.sample_window
        sinr = 10.0 * math.log10(self.acc_tod[1] / self.acc_tod[2]) if self.acc_tod[2] > 0 else float("nan")
        return WindowRecord(t, tod_pos, serving, counts, self.acc_arrived / w,
                            float(self.acc_tod[0] / w), sinr, dist_sum)

    # -- time advance ------------------------------------------------------
    def advance(self, n_ticks: int) -> list[WindowRecord]:
        """Run ``n_ticks`` scheduler ticks; return windows completed meanwhile."""
        cfg = self.config
        tpw = cfg.ticks_per_window
        dt = cfg.scheduler_tick
        grid = self.topology.grid
        rate_coef = cfg.prb_bandwidth_hz * cfg.overhead * dt
        records = []
        remaining = int(n_ticks)
        while remaining > 0:
            offset = self.tick % tpw
            if offset == 0:
                self._begin_window()
            chunk = min(remaining, tpw - offset)
            lam = np.full(self.n, dt * cfg.multiplier_at(self.time) / cfg.ntod_mean_interarrival)
            lam[TOD_ID] = 0.0
            arrivals = self.rng_traffic.poisson(lam, size=(chunk, self.n))
            u_turn = self.rng_mobility.random((chunk, self.n))
            _run_ticks(self.pos, self.heading, self.speed, self.serving, self.backlog,
                       self.cursor, self.rx_dbm, arrivals, u_turn,
                       cfg.tod_offered_rate * dt, cfg.ntod_packet_size * 8.0, cfg.num_prbs,
                       cfg.noise_floor_dbm, rate_coef, cfg.se_cap, dt, grid.block_size,
                       grid.nx, grid.ny, self.acc_tod, self.acc_arrived)
            self.tick += chunk
            remaining -= chunk
            if self.tick % tpw == 0:
                records.append(self._end_window())
        return records


def ntod_distance_sum(pos: np.ndarray, serving: np.ndarray, topology: Topology) -> float:
    """Sum of distances from NToD vehicles outside the ToD's cell to the ToD's serving site."""
    site = topology.site_of(int(serving[TOD_ID]))
    others = np.flatnonzero(serving != serving[TOD_ID])
    others = others[others != TOD_ID]
    if others.size == 0:
        return 0.0
    return float(np.hypot(pos[others, 0] - site[0], pos[others, 1] - site[1]).sum())


def _place_on_roads(rng: np.random.Generator, n: int, grid) -> tuple[np.ndarray, np.ndarray]:
    w, h, b = grid.width, grid.height, grid.block_size
    horiz_len = (grid.ny + 1) * w
    vert_len = (grid.nx + 1) * h
    pos = np.zeros((n, 2))
    heading = np.zeros(n, dtype=np.int64)
    for v in range(n):
        if rng.random() < horiz_len / (horiz_len + vert_len):
            pos[v] = (rng.uniform(0.0, w), rng.integers(0, grid.ny + 1) * b)
            heading[v] = rng.choice((0, 2))
        else:
            pos[v] = (rng.integers(0, grid.nx + 1) * b, rng.uniform(0.0, h))
            heading[v] = rng.choice((1, 3))
    return pos, heading


def build_scenario(config: ScenarioConfig) -> World:
    """Lay out sites and roads, drop vehicles at seeded positions, attach them."""
    config.validate()
    world = World(config, build_topology(config))
    world.pos, world.heading = _place_on_roads(world.rng_place, world.n, world.topology.grid)
    world.speed = np.maximum(
        world.rng_place.normal(config.mean_speed, 0.1 * config.mean_speed, world.n),
        0.1 * config.mean_speed,
    )
    world._draw_shadow()
    world.refresh_links()
    return world


def step(world: World) -> World:
    """Advance ``world`` by one scheduler tick (in place) and return it."""
    world.advance(1)
    return world
