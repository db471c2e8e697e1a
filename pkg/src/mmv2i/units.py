"""Physical quantities, unit conversion and the road scenario.

Everything stored on the dataclasses here is SI (meters, seconds, hertz).
Quantities kept in the log domain carry a ``_db`` / ``_dbm`` suffix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np

SPEED_OF_LIGHT = 3e8  # m/s

KMH_PER_MS = 3.6
PER_KM_PER_PER_M = 1000.0
HZ_PER_GHZ = 1e9


class ConfigError(ValueError):
    """Invalid scenario configuration; ``fields`` names the offending keys."""

    def __init__(self, message: str, fields: list[str] | None = None):
        self.fields = list(fields or [])
        if self.fields:
            message = f"{message}: {', '.join(self.fields)}"
        super().__init__(message)


def _sig15(x: float) -> float:
    return float(f"{x:.15g}")


def per_km(rho_per_m: float) -> float:
    """Density in nodes/km, to 15 significant digits to hide float noise from the SI round trip."""
    return _sig15(rho_per_m * PER_KM_PER_PER_M)


def kmh(speed_ms: float) -> float:
    return _sig15(speed_ms * KMH_PER_MS)


def db_to_linear(x_db):
    return np.power(10.0, np.asarray(x_db, dtype=float) / 10.0)


def linear_to_db(x):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class AntennaArray:
    """Uniform planar array of ``rows x cols`` elements."""

    rows: int
    cols: int
    element_spacing_wavelengths: float = 0.5

    def __post_init__(self):
        if int(self.rows) < 1 or int(self.cols) < 1:
            raise ConfigError("array dimensions must be >= 1", ["rows", "cols"])
        object.__setattr__(self, "rows", int(self.rows))
        object.__setattr__(self, "cols", int(self.cols))

    @property
    def n_elements(self) -> int:
        return self.rows * self.cols

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"


@dataclass(frozen=True)
class ScenarioParams:
    rho: float  # nodes per meter
    speed: float  # m/s
    slot_duration: float  # s
    carrier_freq: float = 28e9
    bandwidth: float = 1e9
    tx_power_dbm: float = 30.0
    noise_figure_db: float = 5.0
    sinr_threshold_db: float = -5.0
    bs_array: AntennaArray = field(default_factory=lambda: AntennaArray(8, 8))
    veh_array: AntennaArray = field(default_factory=lambda: AntennaArray(4, 4))
    road_length: float = 5000.0

    def __post_init__(self):
        bad = []
        if not self.rho > 0:
            bad.append("rho")
        if not self.speed >= 0:
            bad.append("speed")
        if not self.slot_duration > 0:
            bad.append("slot_duration")
        if not self.bandwidth > 0:
            bad.append("bandwidth")
        if not self.carrier_freq > 0:
            bad.append("carrier_freq")
        if not self.road_length > 0:
            bad.append("road_length")
        if bad:
            raise ConfigError("invalid scenario parameters", bad)

    def replace(self, **changes) -> "ScenarioParams":
        return replace(self, **changes)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def doppler_hz(self) -> float:
        return self.carrier_freq * self.speed / SPEED_OF_LIGHT


@dataclass(frozen=True)
class Drop:
    """One realization of the road: IN coordinates plus the vehicle position."""

    in_positions: np.ndarray
    an_position: float
    rng_seed: int | None = None

    def nearest_index(self, x: float | None = None) -> int:
        x = self.an_position if x is None else x
        return int(np.argmin(np.abs(self.in_positions - x)))


def sample_drop(params: ScenarioParams, seed) -> Drop:
    """Draw IN positions as a 1-D PPP on ``[0, road_length)`` and place the vehicle.

    The vehicle lands uniformly in the central third of the segment so that
    edge effects of the finite deployment stay away from it.
    """
    length = params.road_length
    rho = params.rho
    if length < 10.0 / rho:
        raise ConfigError(
            f"road segment of {length:g} m is too short for density {rho:g}/m "
            f"(need >= {10.0 / rho:g} m)",
            ["road_length"],
        )
    rng = np.random.default_rng(seed)
    mean_count = rho * length
    n = int(mean_count + 10.0 * math.sqrt(mean_count) + 10)
    pos = np.cumsum(rng.exponential(1.0 / rho, size=n))
    while pos[-1] < length:
        more = np.cumsum(rng.exponential(1.0 / rho, size=n)) + pos[-1]
        pos = np.concatenate([pos, more])
    pos = pos[pos < length]
    an = float(rng.uniform(length / 3.0, 2.0 * length / 3.0))
    return Drop(in_positions=pos, an_position=an, rng_seed=seed if isinstance(seed, int) else None)


# -- external configuration --------------------------------------------------

RAW_DEFAULTS: dict[str, Any] = {
    "rho_per_km": 20.0,
    "speed_kmh": 90.0,
    "slot_s": 0.2,
    "fc_ghz": 28.0,
    "bw_ghz": 1.0,
    "ptx_dbm": 30.0,
    "nf_db": 5.0,
    "sinr_thresh_db": -5.0,
    "bs_array": [8, 8],
    "veh_array": [4, 4],
    "road_m": 5000.0,
}

# Speed presets in km/h; figures use 90, the parameter table lists the rest.
SPEED_PRESETS_KMH = {"figures": (90.0,), "table": (10.0, 20.0, 30.0, 100.0, 130.0)}


def _array_from_raw(value, name: str) -> AntennaArray:
    if isinstance(value, AntennaArray):
        return value
    try:
        rows, cols = (int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError("array must be a [rows, cols] pair", [name]) from None
    if rows < 1 or cols < 1:
        raise ConfigError("array dimensions must be >= 1", [name])
    return AntennaArray(rows, cols)


def convert_units(raw: Mapping[str, Any]) -> ScenarioParams:
    """Build SI ``ScenarioParams`` from config-style values (km, km/h, GHz).

    Missing keys fall back to ``RAW_DEFAULTS``. Unknown keys are ignored so the
    same mapping can carry sweep and channel sections.
    """
    cfg = {**RAW_DEFAULTS, **{k: v for k, v in raw.items() if k in RAW_DEFAULTS}}
    bad = []
    for key in ("rho_per_km", "slot_s", "fc_ghz", "bw_ghz", "road_m"):
        try:
            if not float(cfg[key]) > 0:
                bad.append(key)
        except (TypeError, ValueError):
            bad.append(key)
    try:
        if not float(cfg["speed_kmh"]) >= 0:
            bad.append("speed_kmh")
    except (TypeError, ValueError):
        bad.append("speed_kmh")
    for key in ("ptx_dbm", "nf_db", "sinr_thresh_db"):
        try:
            float(cfg[key])
        except (TypeError, ValueError):
            bad.append(key)
    if bad:
        raise ConfigError("invalid configuration values", bad)

    return ScenarioParams(
        rho=float(cfg["rho_per_km"]) / PER_KM_PER_PER_M,
        speed=float(cfg["speed_kmh"]) / KMH_PER_MS,
        slot_duration=float(cfg["slot_s"]),
        carrier_freq=float(cfg["fc_ghz"]) * HZ_PER_GHZ,
        bandwidth=float(cfg["bw_ghz"]) * HZ_PER_GHZ,
        tx_power_dbm=float(cfg["ptx_dbm"]),
        noise_figure_db=float(cfg["nf_db"]),
        sinr_threshold_db=float(cfg["sinr_thresh_db"]),
        bs_array=_array_from_raw(cfg["bs_array"], "bs_array"),
        veh_array=_array_from_raw(cfg["veh_array"], "veh_array"),
        road_length=float(cfg["road_m"]),
    )


def to_raw(params: ScenarioParams) -> dict[str, Any]:
    """Inverse of :func:`convert_units`."""
    return {
        "rho_per_km": per_km(params.rho),
        "speed_kmh": kmh(params.speed),
        "slot_s": params.slot_duration,
        "fc_ghz": params.carrier_freq / HZ_PER_GHZ,
        "bw_ghz": params.bandwidth / HZ_PER_GHZ,
        "ptx_dbm": params.tx_power_dbm,
        "nf_db": params.noise_figure_db,
        "sinr_thresh_db": params.sinr_threshold_db,
        "bs_array": [params.bs_array.rows, params.bs_array.cols],
        "veh_array": [params.veh_array.rows, params.veh_array.cols],
        "road_m": params.road_length,
    }
