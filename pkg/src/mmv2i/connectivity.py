"""Closed-form slot connectivity and throughput for a vehicle on a PPP road.

A slot of length ``t_rto`` starts connected when the vehicle is inside some
IN's coverage radius; it is then cut short if the vehicle overtakes its
serving IN before the slot ends. Distances to INs are exponential with rate
``rho``. All inputs are SI (1/m, m, m/s, s).
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .channel import ChannelParams
from .coverage import (SPECTRAL_EFFICIENCY_CAP, CoverageResult, _entropy, format_float,
                       sample_rates)
from .units import ScenarioParams, kmh, per_km

DEFINITION = "definition"
DISPLAYED = "displayed"

CSV_COLUMNS = ["rho_per_km", "speed_kmh", "slot_s", "bs_elems", "veh_elems", "r_comm_m",
               "p_start", "p_no_leave", "p_nl", "e_tl_s", "e_tcomm_s", "duration_ratio",
               "rate_bps", "throughput_bps"]


class ClampWarning(UserWarning):
    """v * t_rto >= r_comm; the no-leave probability was clamped to 0."""


class MissingRCommError(KeyError):
    """No coverage radius is available for one or more grid points."""

    def __init__(self, points: Sequence[str], densities: Sequence[float] = ()):
        self.points = list(points)
        self.densities = sorted(set(densities))
        msg = "no R_comm for " + "; ".join(self.points)
        if self.densities:
            msg += " (missing densities per km: " + ", ".join(f"{d:g}" for d in self.densities) + ")"
        super().__init__(msg)

    def __str__(self) -> str:
        return self.args[0]


def _check_positive(**kw):
    for name, value in kw.items():
        if not np.all(np.asarray(value) > 0):
            raise ValueError(f"{name} must be positive")


def p_start(rho, r_comm):
    """Probability the vehicle starts a slot in coverage, 1 - exp(-2 rho R)."""
    _check_positive(rho=rho, r_comm=r_comm)
    return -np.expm1(-2.0 * np.asarray(rho, dtype=float) * np.asarray(r_comm, dtype=float))[()]


def p_no_leave(rho, r_comm, v, t_rto):
    """P(d / v > t_rto | d < R) for d ~ Exp(rho).

    Clamped to 0 (with a :class:`ClampWarning`) once ``v * t_rto >= r_comm``,
    where the expression would turn negative.
    """
    _check_positive(rho=rho, r_comm=r_comm, t_rto=t_rto)
    rho, r, v, t = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (rho, r_comm, v, t_rto)))
    if np.any(v < 0):
        raise ValueError("v must be non-negative")
    step = v * t
    out = (np.exp(-rho * step) - np.exp(-rho * r)) / -np.expm1(-rho * r)
    clamp = step >= r
    if np.any(clamp):
        warnings.warn("v * t_rto >= r_comm; no-leave probability clamped to 0", ClampWarning,
                      stacklevel=2)
        out = np.where(clamp, 0.0, out)
    return np.clip(out, 0.0, 1.0)[()]


def p_nl(p_start_, p_no_leave_):
    return (np.asarray(p_start_, dtype=float) * np.asarray(p_no_leave_, dtype=float))[()]


def _truncated_mean_fraction(x):
    """E[d | d < a] / a for d ~ Exp(rho), as a function of x = rho * a.

    Equals 1/x - 1/(e^x - 1); a short series takes over near 0 where the
    difference cancels.
    """
    x = np.asarray(x, dtype=float)
    small = x < 1e-3
    xs = np.where(small, 1.0, x)
    direct = 1.0 / xs - 1.0 / np.expm1(xs)
    series = 0.5 - x / 12.0 + x ** 3 / 720.0
    return np.where(small, series, direct)


def e_tl(rho, r_comm, v, t_rto, variant: str = DEFINITION):
    """Mean time to overtaking, given that it happens within the slot.

    ``variant="definition"`` is the conditional mean of d / v for d < v t_rto,
    always below ``t_rto``. ``variant="displayed"`` keeps the extra
    (1 - e^{-rho R}) / (1 - e^{-rho v t_rto}) factor and the unnormalized
    integral, for side-by-side comparison only.
    """
    _check_positive(rho=rho, r_comm=r_comm, t_rto=t_rto)
    rho, r, v, t = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (rho, r_comm, v, t_rto)))
    if np.any(v <= 0):
        raise ValueError("e_tl needs v > 0: a stationary vehicle never overtakes")
    x = rho * v * t
    if variant == DEFINITION:
        return (t * _truncated_mean_fraction(x))[()]
    if variant == DISPLAYED:
        integral = (-np.expm1(-x) - x * np.exp(-x)) / rho
        return (-np.expm1(-rho * r) / -np.expm1(-x) * integral / v)[()]
    raise ValueError(f"unknown e_tl variant {variant!r}")


def compose_tcomm(p_start_, p_no_leave_, e_tl_, t_rto):
    """P_start * (p T + (1 - p) E[T_L])."""
    ps, p, tl, t = (np.asarray(a, dtype=float) for a in (p_start_, p_no_leave_, e_tl_, t_rto))
    return (ps * (p * t + (1.0 - p) * tl))[()]


def e_tcomm(rho, r_comm, v, t_rto, variant: str = DEFINITION):
    """Mean connected time per slot; ``p_start * t_rto`` when ``v == 0``."""
    ps = p_start(rho, r_comm)
    p = p_no_leave(rho, r_comm, v, t_rto)
    v_arr = np.asarray(v, dtype=float)
    if np.all(v_arr == 0):
        return compose_tcomm(ps, p, 0.0, t_rto)
    tl = e_tl(rho, r_comm, np.where(v_arr > 0, v_arr, 1.0), t_rto, variant)
    return compose_tcomm(ps, p, np.where(v_arr > 0, tl, 0.0), t_rto)


# -- geometry-consistent forms -----------------------------------------------------
#
# The vehicle is connected when its nearer neighbor (ahead at A, behind at B,
# both Exp(rho)) lies within R, and it leaves only by overtaking a server
# ahead of it. Serving the IN ahead whenever it is within R gives the exact
# slot-level quantities below; they differ from the product forms above by
# terms of order e^{-rho R}.


def p_nl_geometric(rho, r_comm, v, t_rto):
    """P(connected and no overtaking) = e^{-rho v T} - e^{-2 rho R}, for v T <= R."""
    rho, r, v, t = (np.asarray(a, dtype=float) for a in (rho, r_comm, v, t_rto))
    return np.maximum(np.exp(-rho * np.minimum(v * t, r)) - np.exp(-2.0 * rho * r), 0.0)[()]


def e_tcomm_geometric(rho, r_comm, v, t_rto):
    """E[connected time] = T P_start - E[T - A/v; A < v T], for v T <= R."""
    rho, r, v, t = (np.asarray(a, dtype=float) for a in (rho, r_comm, v, t_rto))
    x = rho * np.minimum(v * t, r)
    # E[T - A/v; A < vT] = T (1 - e^{-x}) - (T / x)(1 - e^{-x}(1 + x))
    with np.errstate(invalid="ignore", divide="ignore"):
        lost = t * (-np.expm1(-x)) - t * (-np.expm1(-x) - x * np.exp(-x)) / x
    lost = np.where(x > 0, lost, 0.0)
    return (t * -np.expm1(-2.0 * rho * r) - lost)[()]


# -- rate and throughput -------------------------------------------------------------


def rate_from_sinr(sinr_linear, bandwidth: float, cap: float = SPECTRAL_EFFICIENCY_CAP):
    """Capped Shannon rate W min(log2(1 + SINR), cap) in bit/s."""
    s = np.asarray(sinr_linear, dtype=float)
    return (bandwidth * np.minimum(np.log2(1.0 + s), cap))[()]


def rate_distance(rho: float, r_comm: float) -> float:
    """Serving distance used for the rate: the mean gap 1/rho, capped at R."""
    return min(1.0 / rho, r_comm)


def mean_rate(rho: float, params: ScenarioParams, r_comm: float, n_samples: int = 2000,
              seed=0, channel: ChannelParams = ChannelParams(), cap: float = SPECTRAL_EFFICIENCY_CAP,
              jobs: int = 1, averaged: bool = False) -> float:
    """Monte Carlo mean rate with the vehicle ``min(1/rho, r_comm)`` from its server.

    With ``averaged=True`` each sample instead draws its distance from
    Exp(rho) truncated to ``r_comm`` (floored at 1 m).
    """
    _check_positive(rho=rho, r_comm=r_comm)
    p = params.replace(rho=rho)
    if averaged:
        rng = np.random.default_rng([*_entropy(seed), 1])  # separate from the channel streams
        u = rng.random(n_samples)
        # inverse CDF of the truncated exponential
        d = -np.log1p(u * np.expm1(-rho * r_comm)) / rho
        distance = np.maximum(d, 1.0)
    else:
        distance = rate_distance(rho, r_comm)
    rates = sample_rates(p, distance, n_samples, seed, channel, cap, jobs)
    return float(rates.mean())


def throughput(rate_bps, duration_ratio):
    return (np.asarray(rate_bps, dtype=float) * np.asarray(duration_ratio, dtype=float))[()]


# -- tables --------------------------------------------------------------------------------


@dataclass(frozen=True)
class ConnectivityMetrics:
    p_start: float
    p_no_leave_given_start: float
    p_nl: float
    e_tl_s: float
    e_tcomm_s: float
    duration_ratio: float
    throughput_bps: float = math.nan
    rate_bps: float = math.nan
    # scenario context, for tabulation
    rho_per_km: float = math.nan
    speed_kmh: float = math.nan
    slot_s: float = math.nan
    bs_elems: int = 0
    veh_elems: int = 0
    r_comm_m: float = math.nan
    se: Mapping[str, float] | None = field(default=None, compare=False)

    def as_row(self) -> list:
        return [self.rho_per_km, self.speed_kmh, self.slot_s, self.bs_elems, self.veh_elems,
                self.r_comm_m, self.p_start, self.p_no_leave_given_start, self.p_nl, self.e_tl_s,
                self.e_tcomm_s, self.duration_ratio, self.rate_bps, self.throughput_bps]


def evaluate(params: ScenarioParams, r_comm: float, rate_bps: float = math.nan,
             variant: str = DEFINITION) -> ConnectivityMetrics:
    """All closed forms at one scenario point."""
    rho, v, t = params.rho, params.speed, params.slot_duration
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        ps = float(p_start(rho, r_comm))
        p = float(p_no_leave(rho, r_comm, v, t))
    tl = float(e_tl(rho, r_comm, v, t, variant)) if v > 0 else math.nan
    tc = float(compose_tcomm(ps, p, 0.0 if v == 0 else tl, t))
    ratio = tc / t
    return ConnectivityMetrics(
        p_start=ps, p_no_leave_given_start=p, p_nl=float(p_nl(ps, p)), e_tl_s=tl, e_tcomm_s=tc,
        duration_ratio=ratio, throughput_bps=float(throughput(rate_bps, ratio)), rate_bps=rate_bps,
        rho_per_km=per_km(rho), speed_kmh=kmh(v), slot_s=t,
        bs_elems=params.bs_array.n_elements, veh_elems=params.veh_array.n_elements,
        r_comm_m=float(r_comm),
    )


def _key(rho_per_km: float, params: ScenarioParams):
    bs, veh = params.bs_array, params.veh_array
    return (round(rho_per_km, 6), bs.rows, bs.cols, veh.rows, veh.cols)


class RCommTable:
    """Coverage radius lookup by (density, arrays)."""

    def __init__(self, results: Iterable[CoverageResult] = ()):
        self._r = {}
        for res in results:
            if math.isfinite(res.r_comm_m):
                key = (round(res.rho_per_km, 6), res.bs_array.rows, res.bs_array.cols,
                       res.veh_array.rows, res.veh_array.cols)
                self._r[key] = res.r_comm_m

    def get(self, params: ScenarioParams) -> float | None:
        return self._r.get(_key(per_km(params.rho), params))

    def __len__(self) -> int:
        return len(self._r)


def _point_label(p: ScenarioParams) -> str:
    return (f"rho={per_km(p.rho):g}/km v={kmh(p.speed):g}km/h T={p.slot_duration:g}s "
            f"bs={p.bs_array} veh={p.veh_array}")


def metrics_sweep(grid: Sequence[ScenarioParams], r_comm: float | RCommTable | None = None,
                  *, with_rate: bool = False, n_rate_samples: int = 2000, seed: int = 0,
                  channel: ChannelParams = ChannelParams(), jobs: int = 1,
                  variant: str = DEFINITION) -> list[ConnectivityMetrics]:
    """Closed forms at every grid point, in grid order.

    ``r_comm`` is a fixed radius or a :class:`RCommTable`. Rates are only
    computed when ``with_rate`` is set; they depend on density, arrays and
    radius but not on speed or slot length, so equal points share one
    estimate, seeded from ``seed`` and the arrays alone.
    """
    if not grid:
        raise ValueError("metrics_sweep needs a nonempty grid")
    radii, missing, missing_rho = [], [], []
    for p in grid:
        r = r_comm.get(p) if isinstance(r_comm, RCommTable) else r_comm
        if r is None or not (isinstance(r, (int, float)) and math.isfinite(r) and r > 0):
            missing.append(_point_label(p))
            missing_rho.append(per_km(p.rho))
        radii.append(r)
    if missing:
        raise MissingRCommError(missing, missing_rho)

    rates: dict = {}
    out = []
    for p, r in zip(grid, radii):
        rate = math.nan
        if with_rate:
            key = (_key(per_km(p.rho), p), float(r))
            if key not in rates:
                ent = [int(seed), p.bs_array.rows, p.bs_array.cols, p.veh_array.rows, p.veh_array.cols]
                rates[key] = mean_rate(p.rho, p, r, n_rate_samples, ent, channel, jobs=jobs)
            rate = rates[key]
        out.append(evaluate(p, r, rate, variant))
    return out


def metrics_csv(rows: Iterable[ConnectivityMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for m in rows:
        w.writerow([v if isinstance(v, int) else format_float(v) for v in m.as_row()])
    return buf.getvalue()
