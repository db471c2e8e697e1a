"""Closed forms versus road simulation, one z-score per metric and point."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import connectivity as cx
from .coverage import format_float
from .roadsim import AHEAD, NEAREST, empirical_metrics, simulate_road
from .units import ScenarioParams, kmh, per_km

Z_LIMIT = 3.0
DEFAULT_SLOTS = 100_000

# acceptance grid
GRID_RHO_PER_KM = (5.0, 10.0, 20.0, 40.0, 80.0)
GRID_SPEED_KMH = (30.0, 90.0, 130.0)
GRID_SLOT_S = (0.1, 0.2, 0.5)
GRID_R_COMM_M = 150.0

CSV_COLUMNS = ["rho_per_km", "speed_kmh", "slot_s", "r_comm_m", "convention", "metric",
               "analytic", "empirical", "se", "z_score", "gated"]

# metric name -> closed form (rho, r, v, t); the simulator is the reference
Formula = Callable[[float, float, float, float], float]


def _e_tl_or_nan(variant):
    def f(rho, r, v, t):
        return float(cx.e_tl(rho, r, v, t, variant)) if v > 0 else math.nan
    return f


def default_formulas() -> dict[str, Formula]:
    return {
        "p_start": lambda rho, r, v, t: float(cx.p_start(rho, r)),
        "p_nl": lambda rho, r, v, t: float(cx.evaluate(_params(rho, v, t), r).p_nl),
        "e_tcomm_s": lambda rho, r, v, t: float(cx.evaluate(_params(rho, v, t), r).e_tcomm_s),
        "e_tl_s": _e_tl_or_nan(cx.DEFINITION),
    }


def _params(rho, v, t) -> ScenarioParams:
    return ScenarioParams(rho=rho, speed=v, slot_duration=t)


@dataclass(frozen=True)
class ValidationRow:
    rho_per_km: float
    speed_kmh: float
    slot_s: float
    r_comm_m: float
    convention: str
    metric: str
    analytic: float
    empirical: float
    se: float
    z_score: float
    gated: bool

    @property
    def failed(self) -> bool:
        return self.gated and not abs(self.z_score) <= Z_LIMIT

    def as_row(self) -> list:
        return [format_float(self.rho_per_km), format_float(self.speed_kmh), format_float(self.slot_s),
                format_float(self.r_comm_m), self.convention, self.metric,
                format_float(self.analytic), format_float(self.empirical), format_float(self.se),
                format_float(self.z_score), int(self.gated)]


def z_score(analytic: float, empirical: float, se: float) -> float:
    diff = analytic - empirical
    if not (math.isfinite(analytic) and math.isfinite(empirical)):
        return math.nan
    if se > 0:
        return diff / se
    return 0.0 if diff == 0 else math.copysign(math.inf, diff)


def _binomial_floor(p: float, n: int) -> float:
    p = min(max(p, 0.0), 1.0)
    return math.sqrt(p * (1.0 - p) / n)


def outage_fraction_se(rho: float, r_comm: float, step: float, n_slots: int) -> float:
    """Model SE of the fraction of slots out of coverage.

    The vehicle is out of coverage over the stretch (g - 2R)+ of every gap g.
    The run crosses about ``rho * step * n_slots`` i.i.d. Exp(rho) gaps, and
    the renewal-reward delta method gives the SE of the covered-length
    fraction. With a slow vehicle and rare long gaps this is far larger than a
    batch-means SE that has seen zero or one such gap. The binomial SE over
    slots takes over when slots are farther apart than the gaps.
    """
    q = math.exp(-2.0 * rho * r_comm)
    e_x2 = 2.0 * q / rho ** 2
    e_xg = q * (2.0 / rho ** 2 + 2.0 * r_comm / rho)
    e_g2 = 2.0 / rho ** 2
    var_cycle = max(e_x2 - 2.0 * q * e_xg + q * q * e_g2, 0.0)
    n_gaps = max(rho * step * n_slots, 1.0)
    renewal = math.sqrt(var_cycle / n_gaps) * rho
    return max(renewal, _binomial_floor(q, n_slots))


def validate_point(params: ScenarioParams, r_comm: float, n_slots: int, seed,
                   formulas: Mapping[str, Formula] | None = None) -> list[ValidationRow]:
    """All rows for one grid point.

    Gated rows compare the closed forms with the primary (serve-ahead)
    simulation. Batch-means SEs are floored by model SEs at the analytic
    values: the binomial SE for probabilities (``T`` times that of the
    duration ratio for connected time) and :func:`outage_fraction_se` for
    everything that moves with rare coverage holes, so a run that happened to
    see none cannot give a spurious huge z. Diagnostic rows (``gated = 0``) cover the
    displayed E[T_L] variant, the 2R gap reading of P_start, the
    geometry-consistent forms and the serve-nearest convention.
    """
    f = {**default_formulas(), **(formulas or {})}
    rho, v, t = params.rho, params.speed, params.slot_duration
    ss = np.random.SeedSequence(seed)
    ahead_seed, nearest_seed = ss.spawn(2)
    n = n_slots
    emp = {AHEAD: empirical_metrics(simulate_road(params, r_comm, n, ahead_seed, AHEAD)),
           NEAREST: empirical_metrics(simulate_road(params, r_comm, n, nearest_seed, NEAREST))}
    key = (per_km(rho), kmh(v), t, float(r_comm))
    hole = outage_fraction_se(rho, r_comm, v * t, n)
    rows = []

    def add(conv, metric, analytic, empirical, se, gated):
        analytic = float(analytic)
        rows.append(ValidationRow(*key, conv, metric, analytic, float(empirical), float(se),
                                  z_score(analytic, float(empirical), float(se)), gated))

    for conv, gated in ((AHEAD, True), (NEAREST, False)):
        m = emp[conv]
        a_ps = f["p_start"](rho, r_comm, v, t)
        add(conv, "p_start", a_ps, m.p_start, max(m.se["p_start"], hole), gated)
        a_nl = f["p_nl"](rho, r_comm, v, t)
        add(conv, "p_nl", a_nl, m.p_nl, max(m.se["p_nl"], _binomial_floor(a_nl, n), hole), gated)
        a_tc = f["e_tcomm_s"](rho, r_comm, v, t)
        add(conv, "e_tcomm_s", a_tc, m.e_tcomm_s,
            max(m.se["e_tcomm_s"], t * _binomial_floor(a_tc / t, n), t * hole), gated)
        if v > 0 and m.se["n_overtook"] > 1:
            add(conv, "e_tl_s", f["e_tl_s"](rho, r_comm, v, t), m.e_tl_s, m.se["e_tl_s"], gated)

    m = emp[AHEAD]
    a_ps = f["p_start"](rho, r_comm, v, t)
    add(AHEAD, "p_start_gap2r", a_ps, m.se["p_start_gap"],
        max(m.se["p_start_gap_se"], _binomial_floor(a_ps, n), hole), False)
    if v > 0 and m.se["n_overtook"] > 1:
        add(AHEAD, "e_tl_s_displayed", cx.e_tl(rho, r_comm, v, t, cx.DISPLAYED), m.e_tl_s,
            m.se["e_tl_s"], False)
    a = float(cx.p_nl_geometric(rho, r_comm, v, t))
    add(AHEAD, "p_nl_geometric", a, m.p_nl, max(m.se["p_nl"], _binomial_floor(a, n), hole), False)
    a = float(cx.e_tcomm_geometric(rho, r_comm, v, t))
    add(AHEAD, "e_tcomm_s_geometric", a, m.e_tcomm_s,
        max(m.se["e_tcomm_s"], t * _binomial_floor(a / t, n), t * hole), False)
    return rows


def point_seed(seed: int, rho_per_km: float, speed_kmh: float, slot_s: float) -> list[int]:
    return [int(seed), int(round(rho_per_km * 1000)), int(round(speed_kmh * 1000)),
            int(round(slot_s * 1e6))]


def _run_point(args):
    params, r_comm, n_slots, seed, formulas = args
    return validate_point(params, r_comm, n_slots, seed, formulas)


def validation_grid(rho_per_km: Sequence[float] = GRID_RHO_PER_KM,
                    speed_kmh: Sequence[float] = GRID_SPEED_KMH,
                    slot_s: Sequence[float] = GRID_SLOT_S,
                    base: ScenarioParams | None = None) -> list[ScenarioParams]:
    base = base or ScenarioParams(rho=0.02, speed=25.0, slot_duration=0.2)
    return [base.replace(rho=r / 1000.0, speed=v / 3.6, slot_duration=t)
            for r in rho_per_km for v in speed_kmh for t in slot_s]


def run_validation(grid: Sequence[ScenarioParams], r_comm: float = GRID_R_COMM_M,
                   n_slots: int = DEFAULT_SLOTS, seed: int = 0,
                   formulas: Mapping[str, Formula] | None = None, jobs: int = 1) -> list[ValidationRow]:
    """Rows for every point, in grid order regardless of ``jobs``."""
    if not grid:
        raise ValueError("run_validation needs a nonempty grid")
    work = [(p, r_comm, n_slots,
             point_seed(seed, per_km(p.rho), kmh(p.speed), p.slot_duration), formulas)
            for p in grid]
    if jobs > 1 and len(work) > 1 and formulas is None:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_run_point, work))
    else:
        parts = [_run_point(w) for w in work]
    return [row for part in parts for row in part]


def validation_csv(rows: Sequence[ValidationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.as_row())
    return buf.getvalue()


def failures(rows: Sequence[ValidationRow]) -> list[ValidationRow]:
    return [r for r in rows if r.failed]
