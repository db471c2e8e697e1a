"""Statistical 28 GHz channel: link state, pathloss, clusters, fading, arrays.

Large-scale constants that are not printed alongside the state-probability
coefficients default to values adopted from the 28 GHz New York City
measurement campaign the model is built on; every one of them can be
overridden from the ``"channel"`` section of the JSON config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import IntEnum
from typing import Any, Mapping

import numpy as np

from .units import SPEED_OF_LIGHT, AntennaArray, ConfigError


class LinkState(IntEnum):
    LOS = 0
    NLOS = 1
    OUTAGE = 2


class OutageError(ValueError):
    """Raised when an operation needs a physical path but the link is in outage."""


@dataclass(frozen=True)
class StateProbabilityParams:
    a_out: float = 0.0334  # 1/m
    b_out: float = 5.2
    a_los: float = 0.0149  # 1/m

    def __post_init__(self):
        if not (self.a_out > 0 and self.a_los > 0):
            raise ValueError("a_out and a_los must be positive")


@dataclass(frozen=True)
class PathlossParams:
    alpha_db: float
    beta: float
    shadow_sigma_db: float

    def __post_init__(self):
        if not self.beta > 0 or self.shadow_sigma_db < 0:
            raise ValueError("pathloss needs beta > 0 and sigma >= 0")


@dataclass(frozen=True)
class ChannelParams:
    state: StateProbabilityParams = field(default_factory=StateProbabilityParams)
    los: PathlossParams = field(default_factory=lambda: PathlossParams(61.4, 2.0, 5.8))
    nlos: PathlossParams = field(default_factory=lambda: PathlossParams(72.0, 2.92, 8.7))
    lambda_clusters: float = 1.8
    max_subpaths: int = 10
    rms_angle_spread_deg: float = 10.0
    elevation_sector_deg: float = 45.0
    # cluster power profile: exp decay in excess delay times lognormal fluctuation
    delay_decay_ratio: float = 2.8
    cluster_fluct_db: float = 4.0
    cluster_delay_mean_s: float = 100e-9
    subpath_delay_spread_s: float = 10e-9

    def __post_init__(self):
        if not self.lambda_clusters > 0:
            raise ValueError("lambda_clusters must be positive")
        if self.max_subpaths < 1:
            raise ValueError("max_subpaths must be >= 1")

    def pathloss_for(self, state: LinkState) -> PathlossParams:
        if state == LinkState.LOS:
            return self.los
        if state == LinkState.NLOS:
            return self.nlos
        raise OutageError("no pathloss in outage")

    @classmethod
    def from_raw(cls, raw: Mapping[str, Any] | None) -> "ChannelParams":
        """Apply the flat override keys of the config's ``channel`` section."""
        base = cls()
        if not raw:
            return base
        raw = dict(raw)
        known = {
            "alpha_los_db", "beta_los", "sigma_los_db",
            "alpha_nlos_db", "beta_nlos", "sigma_nlos_db",
            "a_out", "b_out", "a_los",
        } | {f.name for f in fields(cls) if f.name not in ("state", "los", "nlos")}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError("unknown channel keys", unknown)
        los = PathlossParams(
            float(raw.pop("alpha_los_db", base.los.alpha_db)),
            float(raw.pop("beta_los", base.los.beta)),
            float(raw.pop("sigma_los_db", base.los.shadow_sigma_db)),
        )
        nlos = PathlossParams(
            float(raw.pop("alpha_nlos_db", base.nlos.alpha_db)),
            float(raw.pop("beta_nlos", base.nlos.beta)),
            float(raw.pop("sigma_nlos_db", base.nlos.shadow_sigma_db)),
        )
        state = StateProbabilityParams(
            float(raw.pop("a_out", base.state.a_out)),
            float(raw.pop("b_out", base.state.b_out)),
            float(raw.pop("a_los", base.state.a_los)),
        )
        return replace(base, state=state, los=los, nlos=nlos, **raw)


# -- link state ---------------------------------------------------------------


def link_state_probabilities(d, p: StateProbabilityParams = StateProbabilityParams()):
    """Return ``(p_out, p_los, p_nlos)`` at distance ``d`` (scalar or array)."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    p_out = np.maximum(0.0, 1.0 - np.exp(-p.a_out * d + p.b_out))
    p_los = (1.0 - p_out) * np.exp(-p.a_los * d)
    p_nlos = (1.0 - p_out) - p_los
    if d.ndim == 0:
        return float(p_out), float(p_los), float(p_nlos)
    return p_out, p_los, p_nlos


def link_state_from_uniform(d, u, p: StateProbabilityParams = StateProbabilityParams()):
    """Inverse-CDF state draw from uniforms ``u`` (order LoS, NLoS, outage).

    With ``u`` held fixed the state only gets worse as ``d`` grows, which the
    coverage search relies on for common random numbers.
    """
    p_out, p_los, _ = link_state_probabilities(d, p)
    u = np.asarray(u, dtype=float)
    state = np.full(np.broadcast(np.asarray(d), u).shape, int(LinkState.OUTAGE), dtype=np.int8)
    state[u < 1.0 - p_out] = LinkState.NLOS
    state[u < p_los] = LinkState.LOS
    return state


def sample_link_state(d: float, p: StateProbabilityParams = StateProbabilityParams(), seed=None) -> LinkState:
    rng = np.random.default_rng(seed)
    return LinkState(int(link_state_from_uniform(d, rng.random(), p)))


# -- pathloss -------------------------------------------------------------------


def pathloss_db(d: float, state: LinkState, params: ChannelParams = ChannelParams(), shadowing=None) -> float:
    """Pathloss in dB for a LoS/NLoS link, shadowing included.

    ``shadowing`` is ``None`` (no shadowing), a value in dB used as-is, or a
    ``numpy.random.Generator`` from which a zero-mean Gaussian with the state's
    standard deviation is drawn.
    """
    if state == LinkState.OUTAGE:
        raise OutageError("pathloss is undefined in outage; treat the link as absent")
    if not d > 0:
        raise ValueError("pathloss needs d > 0")
    pl = params.pathloss_for(state)
    if shadowing is None:
        xi = 0.0
    elif isinstance(shadowing, np.random.Generator):
        xi = pl.shadow_sigma_db * shadowing.standard_normal()
    else:
        xi = float(shadowing)
    return pl.alpha_db + 10.0 * pl.beta * math.log10(d) + xi


def pathloss_db_array(d, state, z, params: ChannelParams = ChannelParams()):
    """Vectorized pathloss: ``z`` are standard-normal shadowing deviates.

    Outage entries come back as ``+inf``.
    """
    d = np.asarray(d, dtype=float)
    state = np.asarray(state)
    alpha = np.where(state == LinkState.LOS, params.los.alpha_db, params.nlos.alpha_db)
    beta = np.where(state == LinkState.LOS, params.los.beta, params.nlos.beta)
    sigma = np.where(state == LinkState.LOS, params.los.shadow_sigma_db, params.nlos.shadow_sigma_db)
    pl = alpha + 10.0 * beta * np.log10(d) + sigma * np.asarray(z)
    return np.where(state == LinkState.OUTAGE, np.inf, pl)


# -- clusters -------------------------------------------------------------------


@dataclass(frozen=True)
class Cluster:
    power_fractions: np.ndarray
    aoa_az: np.ndarray
    aoa_el: np.ndarray
    aod_az: np.ndarray
    aod_el: np.ndarray
    delays: np.ndarray

    @property
    def n_subpaths(self) -> int:
        return len(self.power_fractions)


@dataclass(frozen=True)
class ClusterSet:
    """Clusters stored flat, one entry per subpath; ``counts[k]`` is L_k."""

    counts: np.ndarray
    powers: np.ndarray
    aoa_az: np.ndarray
    aoa_el: np.ndarray
    aod_az: np.ndarray
    aod_el: np.ndarray
    delays: np.ndarray

    @property
    def n_clusters(self) -> int:
        return len(self.counts)

    @property
    def n_subpaths(self) -> int:
        return len(self.powers)

    def offset(self, k: int, l: int) -> int:
        if not (0 <= k < self.n_clusters and 0 <= l < self.counts[k]):
            raise IndexError(f"no subpath ({k}, {l})")
        return int(np.sum(self.counts[:k])) + l

    @property
    def clusters(self) -> list[Cluster]:
        out = []
        edges = np.concatenate([[0], np.cumsum(self.counts)])
        for a, b in zip(edges[:-1], edges[1:]):
            out.append(Cluster(self.powers[a:b], self.aoa_az[a:b], self.aoa_el[a:b],
                               self.aod_az[a:b], self.aod_el[a:b], self.delays[a:b]))
        return out


def _wrap(angle):
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


def sample_cluster_batch(n_links: int, params: ChannelParams, rng: np.random.Generator):
    """Draw clusters for ``n_links`` independent links at once.

    Returns ``(link_of_subpath, link_of_cluster, counts, arrays)``; ``arrays``
    holds the flat per-subpath fields with powers normalized to 1 per link.
    """
    k = np.maximum(rng.poisson(params.lambda_clusters, size=n_links), 1)
    n_cl = int(k.sum())
    link_of_cluster = np.repeat(np.arange(n_links), k)
    counts = rng.integers(1, params.max_subpaths + 1, size=n_cl)

    tau_c = rng.exponential(params.cluster_delay_mean_s, size=n_cl)
    decay = (params.delay_decay_ratio - 1.0) / params.delay_decay_ratio
    fluct = rng.normal(0.0, params.cluster_fluct_db, size=n_cl)
    p_cl = np.exp(-decay * tau_c / params.cluster_delay_mean_s) * 10.0 ** (-0.1 * fluct)

    sector = math.radians(params.elevation_sector_deg)
    spread = math.radians(params.rms_angle_spread_deg)
    centers = (
        rng.uniform(-np.pi, np.pi, n_cl),
        rng.uniform(-sector, sector, n_cl),
        rng.uniform(-np.pi, np.pi, n_cl),
        rng.uniform(-sector, sector, n_cl),
    )

    cluster_of_sub = np.repeat(np.arange(n_cl), counts)
    n_sub = len(cluster_of_sub)
    link_of_sub = link_of_cluster[cluster_of_sub]
    offs = rng.normal(0.0, spread, size=(4, n_sub))
    aoa_az = _wrap(centers[0][cluster_of_sub] + offs[0])
    aoa_el = np.clip(centers[1][cluster_of_sub] + offs[1], -np.pi / 2, np.pi / 2)
    aod_az = _wrap(centers[2][cluster_of_sub] + offs[2])
    aod_el = np.clip(centers[3][cluster_of_sub] + offs[3], -np.pi / 2, np.pi / 2)
    delays = tau_c[cluster_of_sub] + rng.uniform(0.0, params.subpath_delay_spread_s, size=n_sub)

    powers = (p_cl / counts)[cluster_of_sub]
    totals = np.bincount(link_of_sub, weights=powers, minlength=n_links)
    powers = powers / totals[link_of_sub]

    arrays = dict(powers=powers, aoa_az=aoa_az, aoa_el=aoa_el, aod_az=aod_az,
                  aod_el=aod_el, delays=delays)
    return link_of_sub, link_of_cluster, counts, arrays


def sample_clusters(params: ChannelParams = ChannelParams(), seed=None) -> ClusterSet:
    rng = np.random.default_rng(seed)
    _, _, counts, arrays = sample_cluster_batch(1, params, rng)
    return ClusterSet(counts=counts, **arrays)


def expected_cluster_count(lam: float, kmax: int = 50) -> float:
    """E[max(Poisson(lam), 1)] by direct summation of the pmf."""
    total = 0.0
    pmf = math.exp(-lam)
    for k in range(kmax + 1):
        if k > 0:
            pmf *= lam / k
        total += max(k, 1) * pmf
    return total


# -- channel instance and fading -------------------------------------------------


@dataclass(frozen=True)
class ChannelInstance:
    state: LinkState
    pathloss_db: float
    clusters: ClusterSet
    doppler_hz: float
    motion_angles: np.ndarray


def motion_angles_for(clusters: ClusterSet) -> np.ndarray:
    """Angle between each arrival direction and the direction of travel (+x)."""
    c = np.cos(clusters.aoa_az) * np.cos(clusters.aoa_el)
    return np.arccos(np.clip(c, -1.0, 1.0))


def sample_channel(d: float, params: ChannelParams = ChannelParams(), *, carrier_freq: float = 28e9,
                   speed: float = 0.0, seed=None, shadowing: bool = True) -> ChannelInstance:
    """Draw a complete link: state, pathloss with shadowing, and clusters."""
    rng = np.random.default_rng(seed)
    state = LinkState(int(link_state_from_uniform(d, rng.random(), params.state)))
    if state == LinkState.OUTAGE:
        pl = math.inf
    else:
        pl = pathloss_db(max(d, 1.0), state, params, rng if shadowing else None)
    clusters = sample_clusters(params, rng)
    return ChannelInstance(state=state, pathloss_db=pl, clusters=clusters,
                           doppler_hz=carrier_freq * speed / SPEED_OF_LIGHT,
                           motion_angles=motion_angles_for(clusters))


def subpath_gains(ch: ChannelInstance, t: float = 0.0, f: float = 0.0) -> np.ndarray:
    """All g_kl(t, f) in flat subpath order."""
    cs = ch.clusters
    phase = 2.0 * np.pi * (ch.doppler_hz * np.cos(ch.motion_angles) * t - cs.delays * f)
    return np.sqrt(cs.powers) * np.exp(1j * phase)


def small_scale_fading(cluster: int, subpath: int, t: float, f: float, ch: ChannelInstance) -> complex:
    i = ch.clusters.offset(cluster, subpath)
    cs = ch.clusters
    phase = 2.0 * np.pi * (ch.doppler_hz * math.cos(ch.motion_angles[i]) * t - cs.delays[i] * f)
    return complex(math.sqrt(cs.powers[i]) * np.exp(1j * phase))


# -- arrays and beamforming --------------------------------------------------------


def _cis(x) -> np.ndarray:
    """exp(1j * x) for real ``x``, without a complex exponential."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape, dtype=complex)
    out.real = np.cos(x)
    out.imag = np.sin(x)
    return out


def _powers(c: np.ndarray, n: int) -> np.ndarray:
    """``c ** arange(n)`` along a new trailing axis, by repeated products."""
    out = np.empty(c.shape + (n,), dtype=complex)
    out[..., 0] = 1.0
    for i in range(1, n):
        out[..., i] = out[..., i - 1] * c
    return out


def signature_factors(array: AntennaArray, azimuth, elevation):
    """Vertical and horizontal factors of the (unnormalized) UPA response.

    ``spatial_signature`` is their Kronecker product over ``sqrt(n_elements)``.
    """
    az = np.asarray(azimuth, dtype=float)
    el = np.asarray(elevation, dtype=float)
    az, el = np.broadcast_arrays(az, el)
    k = 2.0 * np.pi * array.element_spacing_wavelengths
    vert = _powers(_cis(k * np.sin(el)), array.rows)
    horiz = _powers(_cis(k * np.sin(az) * np.cos(el)), array.cols)
    return vert, horiz


def spatial_signature(array: AntennaArray, azimuth, elevation) -> np.ndarray:
    """Unit-norm UPA response; element ``(m, n)`` is flattened as ``m * cols + n``.

    Rows stack along the vertical axis and columns along the horizontal one,
    so boresight is azimuth = elevation = 0. Array-valued angles broadcast and
    add a trailing element axis.
    """
    vert, horiz = signature_factors(array, azimuth, elevation)
    v = (vert[..., :, None] * horiz[..., None, :]).reshape(vert.shape[:-1] + (array.n_elements,))
    return v / math.sqrt(array.n_elements)


def assemble_channel_matrix(ch: ChannelInstance, arrays: tuple[AntennaArray, AntennaArray],
                            t: float = 0.0, f: float = 0.0) -> np.ndarray:
    """Channel matrix of shape ``(rx elements, tx elements)``.

    The unit-norm signatures are scaled by ``sqrt(n_rx * n_tx)`` so that array
    gain shows up in the matrix, and the sum is normalized by the square root
    of the total subpath count.
    """
    if ch.state == LinkState.OUTAGE:
        raise OutageError("no channel matrix in outage")
    tx, rx = arrays
    cs = ch.clusters
    g = subpath_gains(ch, t, f)
    u_rx = spatial_signature(rx, cs.aoa_az, cs.aoa_el)
    u_tx = spatial_signature(tx, cs.aod_az, cs.aod_el)
    scale = math.sqrt(rx.n_elements * tx.n_elements / cs.n_subpaths)
    return scale * np.einsum("l,li,lj->ij", g, u_rx, u_tx.conj())


@dataclass(frozen=True)
class BeamformingVectors:
    w_tx: np.ndarray
    w_rx: np.ndarray


def beamforming_gain(H: np.ndarray, w: BeamformingVectors) -> float:
    H = np.asarray(H)
    if H.ndim != 2 or H.shape != (len(w.w_rx), len(w.w_tx)):
        raise ValueError(f"channel {H.shape} does not match beams rx={len(w.w_rx)} tx={len(w.w_tx)}")
    return float(abs(np.vdot(w.w_rx, H @ w.w_tx)) ** 2)


def best_beam_pair(H: np.ndarray) -> BeamformingVectors:
    """Dominant singular pair of ``H``: the beams maximizing |w_rx^H H w_tx|^2."""
    H = np.asarray(H)
    if not np.any(H):
        raise ValueError("cannot align beams on an all-zero channel")
    u, _, vh = np.linalg.svd(H)
    return BeamformingVectors(w_tx=vh[0].conj(), w_rx=u[:, 0])


def _dirichlet(n: int, half) -> np.ndarray:
    """sin(n x) / sin(x), with its limit where sin(x) vanishes."""
    den = np.sin(half)
    ok = np.abs(den) > 1e-7
    out = np.divide(np.sin(n * half), den, out=np.full(half.shape, float(n)), where=ok)
    if not ok.all():
        out[~ok] = n * np.cos(n * half[~ok]) / np.cos(half[~ok])
    return out


def steering_overlap(array: AntennaArray, az1, el1, az2, el2) -> np.ndarray:
    """``u(az1, el1)^H u(az2, el2)`` without forming the signatures.

    The UPA response is a Kronecker product, so the overlap factors into two
    geometric sums, each a phase times a Dirichlet kernel.
    """
    k = np.pi * array.element_spacing_wavelengths  # half the phase step
    el1, el2 = np.asarray(el1, dtype=float), np.asarray(el2, dtype=float)
    hv = np.asarray(k * (np.sin(el2) - np.sin(el1)))
    hh = np.asarray(k * (np.sin(az2) * np.cos(el2) - np.sin(az1) * np.cos(el1)))
    phase = _cis((array.rows - 1) * hv + (array.cols - 1) * hh)
    return phase * (_dirichlet(array.rows, hv) * _dirichlet(array.cols, hh) / array.n_elements)
