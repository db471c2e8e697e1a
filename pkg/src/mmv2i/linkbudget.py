"""Received power, thermal noise and SINR for a vehicle among many INs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import (
    BeamformingVectors,
    ChannelParams,
    LinkState,
    assemble_channel_matrix,
    beamforming_gain,
    best_beam_pair,
    sample_channel,
    spatial_signature,
)
from .units import Drop, ScenarioParams, db_to_linear

THERMAL_DENSITY_DBM_HZ = -174.0


@dataclass(frozen=True)
class NoiseModel:
    bandwidth: float
    noise_figure_db: float = 0.0
    thermal_density_dbm_hz: float = THERMAL_DENSITY_DBM_HZ

    @classmethod
    def from_params(cls, params: ScenarioParams) -> "NoiseModel":
        return cls(params.bandwidth, params.noise_figure_db)


def noise_power_dbm(n: NoiseModel) -> float:
    if not n.bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    return n.thermal_density_dbm_hz + 10.0 * math.log10(n.bandwidth) + n.noise_figure_db


def received_power_dbm(tx_dbm: float, gain_db: float, pl_db: float, shadow_db: float = 0.0) -> float:
    return tx_dbm + gain_db - pl_db - shadow_db


@dataclass(frozen=True)
class Link:
    """Budget components of one IN -> vehicle link.

    ``pathloss_db`` excludes shadowing, which is carried in ``shadow_db``.
    Outage links contribute no power at all.
    """

    tx_power_dbm: float
    gain: float  # linear beamforming gain
    pathloss_db: float
    shadow_db: float = 0.0
    state: LinkState = LinkState.LOS

    @property
    def rx_power_dbm(self) -> float:
        if self.state == LinkState.OUTAGE or self.gain <= 0:
            return -math.inf
        return received_power_dbm(self.tx_power_dbm, 10.0 * math.log10(self.gain),
                                  self.pathloss_db, self.shadow_db)

    @property
    def rx_power_mw(self) -> float:
        p = self.rx_power_dbm
        return 0.0 if p == -math.inf else 10.0 ** (p / 10.0)


def sinr_linear(serving_mw, interference_mw, noise_mw):
    return np.asarray(serving_mw) / (np.asarray(interference_mw) + noise_mw)


def sinr(serving: Link, interferers: Sequence[Link], n: NoiseModel) -> float:
    """SINR in dB; ``-inf`` when the serving link is in outage."""
    s = serving.rx_power_mw
    if s == 0.0:
        return -math.inf
    i = math.fsum(link.rx_power_mw for link in interferers)
    noise = 10.0 ** (noise_power_dbm(n) / 10.0)
    return 10.0 * math.log10(s / (i + noise))


@dataclass(frozen=True)
class LinkBudgetResult:
    rx_power_dbm: float
    pathloss_db: float
    bf_gain_db: float
    sinr_db: float
    serving_index: int
    interference_dbm: float
    shadow_db: float = 0.0


def _random_beam(array, params: ChannelParams, rng) -> np.ndarray:
    sector = math.radians(params.elevation_sector_deg)
    return spatial_signature(array, rng.uniform(-np.pi, np.pi), rng.uniform(-sector, sector))


def evaluate_drop(drop: Drop, params: ScenarioParams, channel: ChannelParams = ChannelParams(),
                  seed=None, x: float | None = None) -> LinkBudgetResult:
    """Serve the vehicle from the IN with the best post-beamforming SINR.

    Straightforward per-link evaluation through the matrix-level channel API;
    slow but easy to audit. Each candidate server gets the optimal beam pair,
    every other IN transmits toward its own random direction, and the victim
    listens with the candidate's receive beam.
    """
    rng = np.random.default_rng(seed)
    x = drop.an_position if x is None else x
    arrays = (params.bs_array, params.veh_array)
    noise = NoiseModel.from_params(params)

    links = []
    for pos in drop.in_positions:
        d = max(abs(pos - x), 1.0)
        ch = sample_channel(d, channel, carrier_freq=params.carrier_freq, speed=params.speed,
                            seed=rng, shadowing=False)
        shadow = 0.0
        if ch.state != LinkState.OUTAGE:
            shadow = channel.pathloss_for(ch.state).shadow_sigma_db * rng.standard_normal()
        links.append((ch, shadow, _random_beam(params.bs_array, channel, rng)))

    best = None
    for j, (ch, shadow, _) in enumerate(links):
        if ch.state == LinkState.OUTAGE:
            continue
        H = assemble_channel_matrix(ch, arrays)
        w = best_beam_pair(H)
        serving = Link(params.tx_power_dbm, beamforming_gain(H, w), ch.pathloss_db, shadow, ch.state)
        others = []
        for k, (chk, shk, wtx) in enumerate(links):
            if k == j or chk.state == LinkState.OUTAGE:
                continue
            Hk = assemble_channel_matrix(chk, arrays)
            gk = beamforming_gain(Hk, BeamformingVectors(w_tx=wtx, w_rx=w.w_rx))
            others.append(Link(params.tx_power_dbm, gk, chk.pathloss_db, shk, chk.state))
        s = sinr(serving, others, noise)
        if best is None or s > best.sinr_db:
            i_mw = math.fsum(o.rx_power_mw for o in others)
            best = LinkBudgetResult(
                rx_power_dbm=serving.rx_power_dbm,
                pathloss_db=ch.pathloss_db,
                bf_gain_db=10.0 * math.log10(serving.gain),
                sinr_db=s,
                serving_index=j,
                interference_dbm=10.0 * math.log10(i_mw) if i_mw > 0 else -math.inf,
                shadow_db=shadow,
            )
    if best is None:
        return LinkBudgetResult(-math.inf, math.inf, -math.inf, -math.inf, -1, -math.inf)
    return best


def noise_mw(params: ScenarioParams) -> float:
    return float(db_to_linear(noise_power_dbm(NoiseModel.from_params(params))))
