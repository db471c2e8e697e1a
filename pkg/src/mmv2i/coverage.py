"""Monte Carlo estimate of the mean IN coverage radius R_comm.

Each trial draws a road, picks the IN nearest to the vehicle as the server,
and walks the vehicle away from it. The trial radius is the largest offset at
which the SINR averaged over a fixed set of channel redraws still clears the
threshold, located by bisection. All redraw randomness (states, shadowing,
clusters, interferer beams) is drawn once per trial and reused at every probed
offset, so the averaged SINR is a smooth function of the offset.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .channel import (
    ChannelParams,
    sample_cluster_batch,
    signature_factors,
    spatial_signature,
    steering_overlap,
)
from .linkbudget import noise_mw
from .units import AntennaArray, ConfigError, ScenarioParams, per_km, sample_drop

MIN_TRIALS = 100
N_REDRAWS = 20
BISECTION_TOL_M = 1.0
DEFAULT_TRIALS = 5000
CI_Z = 1.959963984540054

CSV_COLUMNS = ["rho_per_km", "bs_rows", "bs_cols", "veh_rows", "veh_cols",
               "r_comm_m", "ci95_m", "n_trials", "seed"]


def search_limit_m(channel: ChannelParams, tail: float = 1e-9) -> float:
    """Distance beyond which a link is out of outage with probability < ``tail``."""
    return (channel.state.b_out - math.log(tail)) / channel.state.a_out


class SinrField:
    """SINR of one server seen from a vehicle sliding along the road.

    ``sinr(r)`` returns the linear SINR of every redraw with the vehicle at
    offset ``r`` from the server, on the side given by ``direction``.
    Interferer gains are drawn lazily, the first time an interferer is out of
    outage in a redraw whose serving link is alive.
    """

    def __init__(self, in_positions: np.ndarray, serving: int, direction: float,
                 params: ScenarioParams, channel: ChannelParams, n_redraws: int,
                 rng: np.random.Generator):
        self.x = np.asarray(in_positions, dtype=float)
        self.j = serving
        self.direction = 1.0 if direction >= 0 else -1.0
        self.params = params
        self.channel = channel
        self.rng = rng
        self.noise_mw = noise_mw(params)
        m, k = n_redraws, len(self.x)
        self.n_redraws = m
        self.u = rng.random((m, k))
        self.z = rng.standard_normal((m, k))
        sector = math.radians(channel.elevation_sector_deg)
        self.beam_az = rng.uniform(-np.pi, np.pi, (m, k))
        self.beam_el = rng.uniform(-sector, sector, (m, k))
        st = channel.state
        with np.errstate(divide="ignore"):
            self.live_reach = float((st.b_out - np.log(self.u.min(initial=1.0))) / st.a_out)
        # received power at 1 m without beamforming gain, per state
        los, nlos = channel.los, channel.nlos
        self.c_los = 10.0 ** ((params.tx_power_dbm - los.alpha_db - los.shadow_sigma_db * self.z) / 10.0)
        self.c_nlos = 10.0 ** ((params.tx_power_dbm - nlos.alpha_db - nlos.shadow_sigma_db * self.z) / 10.0)
        self.known = np.zeros((m, k), dtype=bool)
        self.gain = np.zeros((m, k))
        self.w_rx, self.gain[:, serving] = serving_beams(
            m, params.bs_array, params.veh_array, channel, rng)
        self.known[:, serving] = True
        self.g_cap = float(params.bs_array.n_elements * params.veh_array.n_elements)

    def _window(self, y: float) -> slice:
        # beyond this distance every redraw of every IN is in outage
        lo = np.searchsorted(self.x, y - self.live_reach, side="left")
        hi = np.searchsorted(self.x, y + self.live_reach, side="right")
        return slice(min(lo, self.j), max(hi, self.j + 1))

    def _base_mw(self, d: np.ndarray, cols) -> np.ndarray:
        """Received power before beamforming gain; zero in outage."""
        st, ch = self.channel.state, self.channel
        p_out = np.maximum(0.0, 1.0 - np.exp(-st.a_out * d + st.b_out))
        p_los = (1.0 - p_out) * np.exp(-st.a_los * d)
        u = self.u[:, cols]
        los = u < p_los
        base = np.where(los, self.c_los[:, cols] * d ** -ch.los.beta,
                        self.c_nlos[:, cols] * d ** -ch.nlos.beta)
        base[u >= 1.0 - p_out] = 0.0
        return base

    def _geometry(self, r: float):
        r = max(r, 1.0)
        y = self.x[self.j] + self.direction * r
        w = self._window(y)
        d = np.maximum(np.abs(self.x[w] - y), 1.0)
        js = self.j - w.start
        d[js] = r
        base = self._base_mw(d, w)
        s = base[:, js] * self.gain[:, self.j]
        base[s == 0.0] = 0.0  # redraws with a dead server are not evaluated
        base[:, js] = 0.0
        return w, s, base

    def _fill_gains(self, w: slice, mask: np.ndarray):
        mi, ki = np.nonzero(mask)
        if len(mi) == 0:
            return
        ki = ki + w.start
        self.gain[mi, ki] = interferer_gains(
            self.w_rx[mi], self.beam_az[mi, ki], self.beam_el[mi, ki],
            self.params.bs_array, self.params.veh_array, self.channel, self.rng)
        self.known[mi, ki] = True

    def sinr(self, r: float) -> np.ndarray:
        w, s, base = self._geometry(r)
        self._fill_gains(w, (base > 0.0) & ~self.known[:, w])
        i = (base * self.gain[:, w]).sum(axis=1)
        return s / (i + self.noise_mw)

    def snr(self, r: float) -> np.ndarray:
        """Interference-free upper bound on :meth:`sinr`; draws nothing."""
        d = np.array([max(r, 1.0)])
        j = slice(self.j, self.j + 1)
        return self._base_mw(d, j)[:, 0] * self.gain[:, self.j] / self.noise_mw

    def covered(self, r: float, threshold_lin: float) -> bool:
        """Whether the redraw-averaged SINR at offset ``r`` clears the threshold.

        Same answer as thresholding ``sinr(r).mean()``, but undrawn interferer
        gains are first replaced by their ceiling ``n_rx * n_tx`` (and by zero)
        to bracket the SINR, and only drawn, strongest bound first, while the
        bracket straddles the threshold.
        """
        if not _covered(self.snr(r).mean(), threshold_lin):
            return False
        w, s, base = self._geometry(r)
        m = self.n_redraws
        while True:
            unknown = (base > 0.0) & ~self.known[:, w]
            i_lo = (base * self.gain[:, w]).sum(axis=1)
            bound = np.where(unknown, base * self.g_cap, 0.0)
            i_hi = i_lo + bound.sum(axis=1)
            if _covered((s / (i_hi + self.noise_mw)).sum() / m, threshold_lin):
                return True
            if not _covered((s / (i_lo + self.noise_mw)).sum() / m, threshold_lin):
                return False
            flat = np.flatnonzero(unknown)
            take = max(16, len(flat) // 2)
            order = np.argsort(-bound.ravel()[flat], kind="stable")[:take]
            pick = np.zeros_like(unknown)
            pick.ravel()[flat[order]] = True
            self._fill_gains(w, pick)


def _pad_by_link(link: np.ndarray, n: int, values: np.ndarray) -> np.ndarray:
    """Scatter flat per-subpath rows into a zero-padded ``(n, max_sub, ...)`` block."""
    counts = np.bincount(link, minlength=n)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(len(link)) - starts[link]
    out = np.zeros((n, counts.max()) + values.shape[1:], dtype=values.dtype)
    out[link, pos] = values
    return out


def serving_beams(n: int, tx: AntennaArray, rx: AntennaArray, channel: ChannelParams,
                  rng: np.random.Generator):
    """Draw ``n`` server channels and align on each; returns ``(w_rx, gain)``.

    The best receive beam is the top eigenvector of H H^H and the gain its
    eigenvalue, i.e. the squared largest singular value of H.
    """
    link, _, _, a = sample_cluster_batch(n, channel, rng)
    n_sub = np.bincount(link, minlength=n)
    coef = np.sqrt(a["powers"] * rx.n_elements * tx.n_elements / n_sub[link])
    u_rx = spatial_signature(rx, a["aoa_az"], a["aoa_el"]) * coef[:, None]
    u_tx = spatial_signature(tx, a["aod_az"], a["aod_el"])
    A = _pad_by_link(link, n, u_rx)
    B = _pad_by_link(link, n, u_tx)
    H = np.matmul(A.transpose(0, 2, 1), B.conj())
    gram = np.matmul(H, H.conj().transpose(0, 2, 1))
    return _top_eigenpairs(gram)


def _top_eigenpairs(gram: np.ndarray):
    """Leading eigenvector and eigenvalue of a batch of Hermitian PSD matrices.

    Eigenvalues come from ``eigvalsh``; the vectors from two steps of inverse
    iteration shifted just above the top eigenvalue, which is much cheaper
    than a full batched ``eigh``. Rows whose residual is not tiny fall back
    to ``eigh``.
    """
    lam = np.maximum(np.linalg.eigvalsh(gram)[:, -1], 0.0)
    n = gram.shape[-1]
    shift = lam * (1.0 + 1e-9) + 1e-300
    a = gram - shift[:, None, None] * np.eye(n)
    start = np.argmax(np.linalg.norm(gram, axis=1), axis=1)
    x = np.take_along_axis(gram, start[:, None, None], axis=2)  # strongest column
    try:
        with np.errstate(invalid="ignore", divide="ignore"):  # zero rows fall back below
            for _ in range(2):
                x = np.linalg.solve(a, x)
                x /= np.linalg.norm(x, axis=1, keepdims=True)
    except np.linalg.LinAlgError:
        x = np.full_like(x, np.nan)
    x = x[..., 0]
    resid = np.linalg.norm(np.einsum("bij,bj->bi", gram, x) - lam[:, None] * x, axis=1)
    bad = ~(resid <= 1e-8 * np.maximum(lam, 1e-300))
    if bad.any():
        vals, vecs = np.linalg.eigh(gram[bad])
        x[bad] = vecs[:, :, -1]
        lam[bad] = np.maximum(vals[:, -1], 0.0)
    return x, lam


def interferer_gains(w_rx: np.ndarray, beam_az, beam_el, tx: AntennaArray, rx: AntennaArray,
                     channel: ChannelParams, rng: np.random.Generator) -> np.ndarray:
    """|w_rx^H H w_tx|^2 for freshly drawn channels, one per row of ``w_rx``.

    ``w_tx`` is the transmit steering vector toward ``(beam_az, beam_el)``.
    Each subpath is rank one, so
    w_rx^H H w_tx = c * sum_l g_l (w_rx^H u_rx,l)(u_tx,l^H w_tx)
    and the full matrix is never formed.
    """
    n = len(w_rx)
    beam_az = np.asarray(beam_az, dtype=float)
    beam_el = np.asarray(beam_el, dtype=float)
    link, _, _, a = sample_cluster_batch(n, channel, rng)
    vert, horiz = signature_factors(rx, a["aoa_az"], a["aoa_el"])
    w = w_rx.conj().reshape(n, rx.rows, rx.cols)[link]
    proj_rx = np.einsum("lm,lmk,lk->l", vert, w, horiz) / math.sqrt(rx.n_elements)
    proj_tx = steering_overlap(tx, a["aod_az"], a["aod_el"], beam_az[link], beam_el[link])
    term = np.sqrt(a["powers"]) * proj_rx * proj_tx
    amp = (np.bincount(link, weights=term.real, minlength=n)
           + 1j * np.bincount(link, weights=term.imag, minlength=n))
    n_sub = np.bincount(link, minlength=n)
    return rx.n_elements * tx.n_elements / n_sub * np.abs(amp) ** 2


def _trial_field(params: ScenarioParams, channel: ChannelParams, seed, n_redraws: int):
    rng = np.random.default_rng(seed)
    drop = sample_drop(params, rng)
    if len(drop.in_positions) == 0:
        return None
    j = drop.nearest_index()
    direction = drop.an_position - drop.in_positions[j]
    return SinrField(drop.in_positions, j, direction, params, channel, n_redraws, rng)


def _covered(mean_sinr: float, threshold_lin: float) -> bool:
    return mean_sinr > 0.0 and mean_sinr >= threshold_lin


def trial_radius(params: ScenarioParams, channel: ChannelParams, seed,
                 n_redraws: int = N_REDRAWS, tol: float = BISECTION_TOL_M) -> float:
    field_ = _trial_field(params, channel, seed, n_redraws)
    if field_ is None:
        return 0.0
    thr = 10.0 ** (params.sinr_threshold_db / 10.0)
    lo, hi = 1.0, search_limit_m(channel)
    if not field_.covered(lo, thr):
        return 0.0
    if field_.covered(hi, thr):
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if field_.covered(mid, thr):
            lo = mid
        else:
            hi = mid
    return lo


def _radii_chunk(args):
    params, channel, seeds, n_redraws = args
    return [trial_radius(params, channel, s, n_redraws) for s in seeds]


def _map_chunks(fn, params, channel, seeds, extra, jobs: int):
    if jobs <= 1 or len(seeds) < 2:
        return fn((params, channel, seeds, extra))
    n_chunks = min(len(seeds), 4 * jobs)
    bounds = np.linspace(0, len(seeds), n_chunks + 1).astype(int)
    chunks = [(params, channel, seeds[a:b], extra) for a, b in zip(bounds[:-1], bounds[1:])]
    out = []
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        for part in ex.map(fn, chunks):
            out.extend(part)
    return out


def _entropy(seed) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


@dataclass(frozen=True)
class CoverageResult:
    r_comm_m: float
    ci95_m: float
    rho_per_m: float
    bs_elems: int
    veh_elems: int
    n_trials: int
    bs_array: AntennaArray = field(default=AntennaArray(8, 8))
    veh_array: AntennaArray = field(default=AntennaArray(4, 4))
    seed: int = 0
    n_zero: int = 0
    reason: str = ""

    @property
    def rho_per_km(self) -> float:
        return per_km(self.rho_per_m)

    def as_row(self) -> list:
        return [self.rho_per_km, self.bs_array.rows, self.bs_array.cols,
                self.veh_array.rows, self.veh_array.cols,
                self.r_comm_m, self.ci95_m, self.n_trials, self.seed]


def estimate_coverage(params: ScenarioParams, n_trials: int = DEFAULT_TRIALS, seed=0,
                      channel: ChannelParams = ChannelParams(), jobs: int = 1,
                      n_redraws: int = N_REDRAWS) -> CoverageResult:
    """Mean coverage radius with a normal-approximation 95% CI.

    Trial ``i`` always uses the ``i``-th child of ``SeedSequence(seed)``, so the
    estimate does not depend on ``jobs``.
    """
    if n_trials < MIN_TRIALS:
        raise ValueError(f"n_trials must be >= {MIN_TRIALS}, got {n_trials}")
    seeds = np.random.SeedSequence(_entropy(seed)).spawn(n_trials)
    radii = np.asarray(_map_chunks(_radii_chunk, params, channel, seeds, n_redraws, jobs))
    mean = float(radii.mean())
    ci = float(CI_Z * radii.std(ddof=1) / math.sqrt(n_trials))
    return CoverageResult(
        r_comm_m=mean, ci95_m=ci, rho_per_m=params.rho,
        bs_elems=params.bs_array.n_elements, veh_elems=params.veh_array.n_elements,
        n_trials=n_trials, bs_array=params.bs_array, veh_array=params.veh_array,
        seed=_entropy(seed)[0], n_zero=int(np.sum(radii == 0.0)),
    )


def cell_seed(seed: int, rho_per_km: float, bs: AntennaArray, veh: AntennaArray) -> list[int]:
    """Per-cell entropy; independent of where the cell sits in a sweep."""
    return [int(seed), int(round(rho_per_km * 1000)), bs.rows, bs.cols, veh.rows, veh.cols]


def coverage_sweep(densities_per_km: Sequence[float],
                   array_configs: Sequence[tuple[AntennaArray, AntennaArray]],
                   params: ScenarioParams, seed: int = 0, n_trials: int = DEFAULT_TRIALS,
                   channel: ChannelParams = ChannelParams(), jobs: int = 1) -> list[CoverageResult]:
    """Cross product of densities and (bs, veh) arrays, config-major order."""
    if not densities_per_km or not array_configs:
        raise ValueError("coverage_sweep needs at least one density and one array config")
    rows = []
    for bs, veh in array_configs:
        for rho_km in densities_per_km:
            try:
                p = params.replace(rho=rho_km / 1000.0, bs_array=bs, veh_array=veh)
                res = estimate_coverage(p, n_trials, cell_seed(seed, rho_km, bs, veh),
                                        channel, jobs)
                res = CoverageResult(**{**res.__dict__, "seed": seed})
            except (ValueError, ConfigError) as exc:
                res = CoverageResult(math.nan, math.nan, rho_km / 1000.0, bs.n_elements,
                                     veh.n_elements, n_trials, bs, veh, seed, 0, str(exc))
            rows.append(res)
    return rows


def format_float(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else ("nan" if math.isnan(x) else repr(x))


def coverage_csv(results: Iterable[CoverageResult]) -> str:
    """CSV text; a trailing ``reason`` column explains NaN cells."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS + ["reason"])
    for r in results:
        row = r.as_row()
        w.writerow([format_float(row[0]), *row[1:5], format_float(row[5]),
                    format_float(row[6]), row[7], row[8], r.reason])
    return buf.getvalue()


def read_coverage_csv(path) -> list[CoverageResult]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            bs = AntennaArray(int(rec["bs_rows"]), int(rec["bs_cols"]))
            veh = AntennaArray(int(rec["veh_rows"]), int(rec["veh_cols"]))
            out.append(CoverageResult(
                r_comm_m=float(rec["r_comm_m"]), ci95_m=float(rec["ci95_m"]),
                rho_per_m=float(rec["rho_per_km"]) / 1000.0,
                bs_elems=bs.n_elements, veh_elems=veh.n_elements,
                n_trials=int(rec["n_trials"]), bs_array=bs, veh_array=veh,
                seed=int(rec["seed"]), reason=rec.get("reason", "") or "",
            ))
    return out


# -- rate at a fixed serving distance ---------------------------------------------

SPECTRAL_EFFICIENCY_CAP = 7.4  # b/s/Hz


def _rate_chunk(args):
    params, channel, items, cap = args
    out = []
    for s, distance in items:
        f = _trial_field(params, channel, s, 1)
        if f is None:
            out.append(0.0)
            continue
        sinr = f.sinr(distance)[0]
        out.append(params.bandwidth * min(math.log2(1.0 + sinr), cap))
    return out


def sample_rates(params: ScenarioParams, distance, n_samples: int, seed=0,
                 channel: ChannelParams = ChannelParams(), cap: float = SPECTRAL_EFFICIENCY_CAP,
                 jobs: int = 1) -> np.ndarray:
    """Per-sample rates (bit/s) with the vehicle ``distance`` m from its server.

    ``distance`` is a scalar or one value per sample.
    """
    seeds = np.random.SeedSequence(_entropy(seed)).spawn(n_samples)
    dist = np.broadcast_to(np.asarray(distance, dtype=float), (n_samples,))
    items = list(zip(seeds, dist.tolist()))
    return np.asarray(_map_chunks(_rate_chunk, params, channel, items, cap, jobs))
