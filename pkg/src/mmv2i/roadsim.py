"""Slot-level simulation of a vehicle driving past a PPP of INs.

Coverage is abstracted by the radius ``r_comm``. At every slot boundary the
vehicle connects if its nearest IN is within ``r_comm``; during the slot it
stays connected until it overtakes the IN serving it. A slot that starts idle
stays idle even if an IN comes into range before it ends.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .connectivity import ConnectivityMetrics
from .coverage import format_float
from .units import ScenarioParams

MIN_SLOTS = 1000
N_BATCHES = 100

AHEAD = "ahead"  # serve the nearest IN ahead when it is in range, else the one behind
NEAREST = "nearest"  # serve whichever IN is nearest
CONVENTIONS = (AHEAD, NEAREST)

TRACE_COLUMNS = ["slot", "x_vehicle_m", "serving_distance_m", "connected_at_start",
                 "overtook", "connected_time_s"]


@dataclass(frozen=True)
class SlotTrace:
    slot_index: int
    connected_at_start: bool
    overtook_during_slot: bool
    connected_time_s: float
    serving_distance_m: float
    x_vehicle_m: float = math.nan
    gap_within_2r: bool = False  # the inter-IN gap holding the vehicle is <= 2 R


@dataclass(frozen=True)
class RoadTrace:
    """Columnar per-slot record of one run; iterates as :class:`SlotTrace`."""

    slot_duration: float
    r_comm: float
    convention: str
    x_vehicle_m: np.ndarray
    connected: np.ndarray
    overtook: np.ndarray
    connected_time_s: np.ndarray
    serving_distance_m: np.ndarray
    gap_within_2r: np.ndarray

    def __len__(self) -> int:
        return len(self.connected)

    def __getitem__(self, i: int) -> SlotTrace:
        return SlotTrace(int(i) if i >= 0 else len(self) + int(i), bool(self.connected[i]),
                         bool(self.overtook[i]), float(self.connected_time_s[i]),
                         float(self.serving_distance_m[i]), float(self.x_vehicle_m[i]),
                         bool(self.gap_within_2r[i]))

    def __iter__(self) -> Iterator[SlotTrace]:
        return (self[i] for i in range(len(self)))


class _PPPStream:
    """Exponential-gap PPP on (origin, inf), generated one window at a time.

    Only points at or beyond the last ``drop_before`` cut are kept in memory.
    """

    def __init__(self, rho: float, rng: np.random.Generator, origin: float = 0.0):
        self.rho = rho
        self.rng = rng
        self.window = 100.0 / rho
        self.pos = np.empty(0)
        self.last = origin

    def extend_to(self, x: float):
        chunks = [self.pos]
        n = max(16, int(1.2 * self.rho * self.window) + 16)
        while self.last <= x:
            new = self.last + np.cumsum(self.rng.exponential(1.0 / self.rho, n))
            chunks.append(new)
            self.last = float(new[-1])
        self.pos = np.concatenate(chunks)

    def drop_before(self, x: float):
        self.pos = self.pos[self.pos >= x]


def simulate_road(params: ScenarioParams, r_comm: float, n_slots: int = 100_000, seed=0,
                  convention: str = AHEAD) -> RoadTrace:
    """Run ``n_slots`` consecutive slots; deterministic given ``seed``.

    The deployment is drawn in windows of ``100 / rho`` meters and a stretch of
    at least ``max(10 / rho, r_comm)`` behind the vehicle is kept, so memory
    stays bounded however long the run.
    """
    if n_slots < MIN_SLOTS:
        raise ValueError(f"n_slots must be >= {MIN_SLOTS}, got {n_slots}")
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}; expected one of {CONVENTIONS}")
    if not r_comm > 0:
        raise ValueError("r_comm must be positive")
    rho, v, t = params.rho, params.speed, params.slot_duration
    step = v * t
    rng = np.random.default_rng(seed)
    keep = max(10.0 / rho, r_comm)
    stream = _PPPStream(rho, rng)
    x0 = keep + 10.0 / rho

    per_block = n_slots if step == 0 else int(min(n_slots, max(1, stream.window // step)))
    cols = {k: [] for k in ("x", "conn", "over", "tc", "dist", "gap")}
    for b0 in range(0, n_slots, per_block):
        k = np.arange(b0, min(b0 + per_block, n_slots))
        x = x0 + k * step
        stream.drop_before(x[0] - keep)
        stream.extend_to(x[-1] + r_comm + step)
        pos = stream.pos
        i = np.searchsorted(pos, x, side="right")  # first IN strictly ahead
        ahead = pos[i] - x
        behind = np.where(i > 0, x - pos[np.maximum(i - 1, 0)], np.inf)
        conn = np.minimum(ahead, behind) <= r_comm
        if convention == AHEAD:
            serve_ahead = ahead <= r_comm
        else:
            serve_ahead = conn & (ahead <= behind)
        over = serve_ahead & (ahead < step)
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = np.where(conn, np.where(over, ahead / (v if v > 0 else 1.0), t), 0.0)
        cols["x"].append(x)
        cols["conn"].append(conn)
        cols["over"].append(over)
        cols["tc"].append(tc)
        cols["dist"].append(np.where(conn, np.where(serve_ahead, ahead, behind), np.nan))
        cols["gap"].append(ahead + behind <= 2.0 * r_comm)
    cat = {k: np.concatenate(v_) for k, v_ in cols.items()}
    return RoadTrace(t, float(r_comm), convention, cat["x"], cat["conn"], cat["over"],
                     cat["tc"], cat["dist"], cat["gap"])


def _columns(traces) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    if isinstance(traces, RoadTrace):
        return (traces.connected, traces.overtook, traces.connected_time_s,
                traces.gap_within_2r, traces.slot_duration)
    traces = list(traces)
    if not traces:
        raise ValueError("empirical_metrics needs at least one slot")
    conn = np.array([s.connected_at_start for s in traces], dtype=bool)
    over = np.array([s.overtook_during_slot for s in traces], dtype=bool)
    tc = np.array([s.connected_time_s for s in traces], dtype=float)
    gap = np.array([s.gap_within_2r for s in traces], dtype=bool)
    return conn, over, tc, gap, math.nan


def batch_se(x: np.ndarray, n_batches: int = N_BATCHES) -> float:
    """Standard error of the mean from non-overlapping batch means.

    Consecutive slots share INs, so plain iid standard errors would be too
    small. Falls back to the iid formula when there are too few samples.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 2:
        return math.nan
    if n < 2 * n_batches:
        return float(x.std(ddof=1) / math.sqrt(n))
    size = n // n_batches
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches))


def empirical_metrics(traces, slot_duration: float | None = None,
                      rate_bps: float = math.nan) -> ConnectivityMetrics:
    """Slot averages of a run, with standard errors in ``.se``.

    ``e_tl_s`` is the mean connected time over slots cut short by overtaking
    (0 if none was). A plain list of :class:`SlotTrace` carries no slot
    length, so pass ``slot_duration`` to get the duration ratio.
    ``se`` also carries ``p_start_gap`` (fraction of slots whose surrounding
    gap is at most 2 R) and its standard error.
    """
    conn, over, tc, gap, t = _columns(traces)
    if slot_duration is not None:
        t = slot_duration
    n = len(conn)
    ps = float(conn.mean())
    nl = conn & ~over
    p_nl = float(nl.mean())
    tl = tc[over]
    e_tl = float(tl.mean()) if tl.size else 0.0
    e_tc = float(tc.mean())
    if math.isfinite(t):
        ratio = e_tc / t
    else:
        ratio = 0.0 if e_tc == 0.0 else math.nan
    se = {
        "p_start": batch_se(conn),
        "p_nl": batch_se(nl),
        "e_tcomm_s": batch_se(tc),
        "e_tl_s": float(tl.std(ddof=1) / math.sqrt(tl.size)) if tl.size > 1 else math.nan,
        "p_start_gap": float(gap.mean()),
        "p_start_gap_se": batch_se(gap),
        "n_slots": n,
        "n_overtook": int(over.sum()),
    }
    se["duration_ratio"] = se["e_tcomm_s"] / t if t and math.isfinite(t) else math.nan
    return ConnectivityMetrics(
        p_start=ps,
        p_no_leave_given_start=p_nl / ps if ps > 0 else 0.0,
        p_nl=p_nl,
        e_tl_s=e_tl,
        e_tcomm_s=e_tc,
        duration_ratio=ratio,
        throughput_bps=rate_bps * ratio,
        rate_bps=rate_bps,
        slot_s=t,
        se=se,
    )


def trace_csv(trace: RoadTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for i in range(len(trace)):
        w.writerow([i, format_float(trace.x_vehicle_m[i]), format_float(trace.serving_distance_m[i]),
                    int(trace.connected[i]), int(trace.overtook[i]),
                    format_float(trace.connected_time_s[i])])
    return buf.getvalue()


def simulate_runs(params: ScenarioParams, r_comm: float, n_slots: int, seeds: Sequence,
                  convention: str = AHEAD) -> RoadTrace:
    """Independent runs concatenated in seed order."""
    runs = [simulate_road(params, r_comm, n_slots, s, convention) for s in seeds]
    if len(runs) == 1:
        return runs[0]
    return RoadTrace(
        runs[0].slot_duration, runs[0].r_comm, convention,
        *(np.concatenate([getattr(r, f) for r in runs])
          for f in ("x_vehicle_m", "connected", "overtook", "connected_time_s",
                    "serving_distance_m", "gap_within_2r")),
    )

