"""Round-robin PRB scheduling, SINR and the SINR-to-rate map."""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def rr_shares(k, num_prbs, cursor, out):
    """Fill ``out[:k]`` with PRB counts for ``k`` backlogged UEs.

    Every UE gets ``num_prbs // k``; the remainder goes one PRB each to the
    UEs at positions cursor, cursor+1, ... (mod k) of the ascending id list.
    """
    if k == 0:
        return
    base = num_prbs // k
    rem = num_prbs % k
    start = cursor % k
    for j in range(k):
        out[j] = base + (1 if (j - start) % k < rem else 0)


@njit(cache=True)
def spectral_efficiency(sinr_lin, se_cap):
    se = math.log2(1.0 + sinr_lin)
    return se if se < se_cap else se_cap


def schedule_uplink(backlogged_vehicles, num_prbs: int, cursor: int = 0) -> dict:
    """Round-robin allocation for one cell and one tick.

    ``backlogged_vehicles`` is an iterable of vehicle ids attached to the cell.
    Returns ``{vehicle_id: n_prbs}``; vehicles that end up with zero PRBs
    (more backlogged vehicles than PRBs) are omitted.
    """
    ids = sorted(int(v) for v in backlogged_vehicles)
    if not ids:
        return {}
    out = np.zeros(len(ids), dtype=np.int64)
    rr_shares(len(ids), int(num_prbs), int(cursor), out)
    return {v: int(n) for v, n in zip(ids, out) if n > 0}


def prb_layout(allocation: dict, num_prbs: int) -> np.ndarray:
    """Map an allocation onto PRB indices: contiguous blocks in id order.

    Returns an int array of length ``num_prbs`` holding the occupying vehicle
    id, or -1 for an unused PRB.
    """
    occ = np.full(num_prbs, -1, dtype=np.int64)
    off = 0
    for v in sorted(allocation):
        occ[off:off + allocation[v]] = v
        off += allocation[v]
    return occ


def sinr_db(signal_dbm: float, noise_dbm: float, interferers_dbm=()) -> float:
    """Per-PRB SINR from a wanted power, noise floor and interferer powers."""
    total = 10.0 ** (noise_dbm / 10.0) + sum(10.0 ** (p / 10.0) for p in interferers_dbm)
    return signal_dbm - 10.0 * math.log10(total)


def prb_rate_bps(sinr_db_value: float, prb_bandwidth_hz: float, se_cap: float = 4.8,
                 overhead: float = 0.9) -> float:
    """Bits/s carried by one PRB at the given SINR."""
    sinr_lin = 10.0 ** (sinr_db_value / 10.0)
    return prb_bandwidth_hz * overhead * spectral_efficiency(sinr_lin, se_cap)
