"""Road grid, site layout and the propagation model.

The scalar kernels are numba-compiled so the simulation engine and the
Python-level operations share one implementation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from todqos.simkit.config import ScenarioConfig

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class Cell:
    cell_id: int
    site_id: int
    sector_index: int
    position: tuple[float, float]
    boresight_azimuth: float


@dataclass(frozen=True)
class Grid:
    """Manhattan road grid: roads run along every multiple of ``block_size``."""

    nx: int
    ny: int
    block_size: float
    road_width: float

    @property
    def width(self) -> float:
        return self.nx * self.block_size

    @property
    def height(self) -> float:
        return self.ny * self.block_size

    def contains(self, pos) -> bool:
        x, y = pos
        return -1e-9 <= x <= self.width + 1e-9 and -1e-9 <= y <= self.height + 1e-9

    def on_road(self, pos, tol: float = 1e-6) -> bool:
        x, y = pos
        b = self.block_size
        return abs(x - round(x / b) * b) <= tol or abs(y - round(y / b) * b) <= tol


@dataclass(frozen=True)
class Topology:
    grid: Grid
    cells: tuple[Cell, ...]
    site_positions: np.ndarray  # (num_sites, 2)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def cell_site(self) -> np.ndarray:
        return np.array([c.site_id for c in self.cells], dtype=np.int64)

    @property
    def cell_azimuth(self) -> np.ndarray:
        return np.array([c.boresight_azimuth for c in self.cells], dtype=np.float64)

    def site_of(self, cell_id: int) -> np.ndarray:
        return self.site_positions[self.cells[cell_id].site_id]


def build_topology(config: ScenarioConfig) -> Topology:
    """Sites sit in a row on the middle horizontal road, ``isd`` apart."""
    nx, ny = config.grid_blocks
    grid = Grid(nx, ny, float(config.block_size), float(config.road_width))
    cx = grid.width / 2.0
    cy = round(ny / 2) * config.block_size
    offsets = (np.arange(config.num_sites) - (config.num_sites - 1) / 2.0) * config.isd
    sites = np.column_stack([cx + offsets, np.full(config.num_sites, cy)])
    step = 360.0 / config.sectors_per_site
    cells = []
    for s in range(config.num_sites):
        for k in range(config.sectors_per_site):
            cells.append(Cell(
                cell_id=len(cells), site_id=s, sector_index=k,
                position=(float(sites[s, 0]), float(sites[s, 1])),
                boresight_azimuth=(30.0 + k * step) % 360.0,
            ))
    return Topology(grid, tuple(cells), sites)


@njit(cache=True)
def free_space_loss_1m(carrier_mhz):
    return 20.0 * math.log10(4.0 * math.pi * carrier_mhz * 1e6 / SPEED_OF_LIGHT)


@njit(cache=True)
def path_loss_db(dist, los, pl0, n_los, n_nlos):
    d = max(dist, 1.0)
    n = n_los if los else n_nlos
    return pl0 + 10.0 * n * math.log10(d)


@njit(cache=True)
def _corridor(v, block, half_width):
    r = math.floor(v / block + 0.5)
    if abs(v - r * block) <= half_width:
        return int(r)
    return -1


@njit(cache=True)
def los_flag(ax, ay, bx, by, block, road_width):
    hw = road_width / 2.0
    ra = _corridor(ay, block, hw)
    if ra >= 0 and ra == _corridor(by, block, hw):
        return True
    ca = _corridor(ax, block, hw)
    if ca >= 0 and ca == _corridor(bx, block, hw):
        return True
    return False


@njit(cache=True)
def antenna_gain_db(dx, dy, boresight, max_gain, beamwidth, front_to_back):
    """Parabolic sector pattern toward offset (dx, dy) from the antenna."""
    if dx * dx + dy * dy < 1e-18:
        return max_gain
    ang = math.degrees(math.atan2(dy, dx))
    off = (ang - boresight + 180.0) % 360.0 - 180.0
    att = 12.0 * (off / beamwidth) ** 2
    if att > front_to_back:
        att = front_to_back
    return max_gain - att


def path_loss(tx, rx, los: bool, config: ScenarioConfig) -> float:
    """Dual-exponent log-distance loss in dB; distance clamped to 1 m."""
    d = math.hypot(tx[0] - rx[0], tx[1] - rx[1])
    return path_loss_db(d, bool(los), free_space_loss_1m(config.carrier_freq),
                        config.n_los, config.n_nlos)


def los_state(tx, rx, grid: Grid) -> bool:
    """Manhattan-corridor rule: LOS iff both points share a road row or column."""
    return bool(los_flag(float(tx[0]), float(tx[1]), float(rx[0]), float(rx[1]),
                         grid.block_size, grid.road_width))


def antenna_gain(cell: Cell, pos, config: ScenarioConfig) -> float:
    return antenna_gain_db(pos[0] - cell.position[0], pos[1] - cell.position[1],
                           cell.boresight_azimuth, config.antenna_max_gain,
                           config.beamwidth_3db, config.front_to_back)


def received_power_dbm(pos, cell: Cell, topo: Topology, config: ScenarioConfig,
                       shadow_db: float = 0.0) -> float:
    """Per-PRB received power at ``cell`` from a UE at ``pos``."""
    los = los_state(pos, cell.position, topo.grid)
    return (config.ue_tx_power + antenna_gain(cell, pos, config)
            - path_loss(pos, cell.position, los, config) + shadow_db)
