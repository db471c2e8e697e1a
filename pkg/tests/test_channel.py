import cmath
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmv2i.channel import (
    BeamformingVectors,
    ChannelInstance,
    ChannelParams,
    ClusterSet,
    LinkState,
    OutageError,
    assemble_channel_matrix,
    beamforming_gain,
    best_beam_pair,
    expected_cluster_count,
    link_state_from_uniform,
    link_state_probabilities,
    pathloss_db,
    sample_channel,
    sample_cluster_batch,
    sample_clusters,
    sample_link_state,
    signature_factors,
    small_scale_fading,
    spatial_signature,
    steering_overlap,
    subpath_gains,
)
from mmv2i.units import AntennaArray


def random_instance(rng, max_clusters=3, doppler=100.0):
    """Hand-built channel with arbitrary (not model-drawn) cluster data."""
    counts = rng.integers(1, 11, size=rng.integers(1, max_clusters + 1))
    n = int(counts.sum())
    p = rng.random(n)
    cs = ClusterSet(counts=counts, powers=p / p.sum(),
                    aoa_az=rng.uniform(-np.pi, np.pi, n), aoa_el=rng.uniform(-0.8, 0.8, n),
                    aod_az=rng.uniform(-np.pi, np.pi, n), aod_el=rng.uniform(-0.8, 0.8, n),
                    delays=rng.uniform(0, 2e-7, n))
    return ChannelInstance(LinkState.LOS, 100.0, cs, doppler, rng.uniform(0, np.pi, n))


def upa_loop(array, az, el):
    # element (m, n) -> exp(j 2 pi s (m sin el + n sin az cos el)) / sqrt(N)
    s = array.element_spacing_wavelengths
    out = []
    for m in range(array.rows):
        for n in range(array.cols):
            out.append(cmath.exp(2j * math.pi * s * (m * math.sin(el) + n * math.sin(az) * math.cos(el))))
    return np.array(out) / math.sqrt(array.n_elements)


# -- link state ---------------------------------------------------------------------


def test_state_probabilities_at_zero():
    assert link_state_probabilities(0.0) == (0.0, 1.0, 0.0)


def test_state_probabilities_200m():
    p_out, p_los, p_nlos = link_state_probabilities(200.0)
    assert p_out == pytest.approx(0.7724, abs=1e-4)
    assert p_los == pytest.approx(0.01157, abs=1e-5)
    assert p_nlos == pytest.approx(0.2160, abs=1e-4)


def test_outage_clamp_boundary():
    d = 5.2 / 0.0334
    assert link_state_probabilities(d)[0] == pytest.approx(0.0, abs=1e-12)
    assert link_state_probabilities(d - 1.0)[0] == 0.0
    assert link_state_probabilities(d + 1.0)[0] > 0.0


@given(st.floats(0, 5000))
def test_state_probabilities_sum_to_one(d):
    p = link_state_probabilities(d)
    assert all(0.0 <= x <= 1.0 for x in p)
    assert sum(p) == pytest.approx(1.0, abs=1e-15)


def test_negative_distance_rejected():
    with pytest.raises(ValueError):
        link_state_probabilities(-1.0)


@pytest.mark.parametrize("d", [50.0, 100.0, 200.0, 400.0])
def test_state_frequencies(d):
    n = 100_000
    rng = np.random.default_rng(int(d))
    states = np.array([sample_link_state(d, seed=rng) for _ in range(n)])
    for prob, state in zip(link_state_probabilities(d), (LinkState.OUTAGE, LinkState.LOS, LinkState.NLOS)):
        freq = np.mean(states == state)
        se = max(math.sqrt(prob * (1 - prob) / n), 1.0 / n)
        assert abs(freq - prob) <= 3 * se, (state, freq, prob)


def test_far_link_in_outage():
    rng = np.random.default_rng(0)
    states = link_state_from_uniform(10_000.0, rng.random(10_000))
    assert np.mean(states == LinkState.OUTAGE) > 0.999


def test_state_at_zero_always_los():
    assert all(sample_link_state(0.0, seed=s) == LinkState.LOS for s in range(50))


def test_state_monotone_under_fixed_uniform():
    u = np.random.default_rng(1).random(500)
    prev = link_state_from_uniform(1.0, u)
    for d in np.linspace(1, 400, 60):
        cur = link_state_from_uniform(d, u)
        assert np.all(cur >= prev)
        prev = cur


# -- pathloss -----------------------------------------------------------------------


def test_pathloss_los_100m():
    assert pathloss_db(100.0, LinkState.LOS) == pytest.approx(101.4, abs=1e-12)


def test_pathloss_nlos_1m():
    assert pathloss_db(1.0, LinkState.NLOS) == 72.0


def test_pathloss_errors():
    with pytest.raises(OutageError):
        pathloss_db(10.0, LinkState.OUTAGE)
    with pytest.raises(ValueError):
        pathloss_db(0.0, LinkState.LOS)


@pytest.mark.parametrize("state,sigma", [(LinkState.LOS, 5.8), (LinkState.NLOS, 8.7)])
def test_shadowing_spread(state, sigma):
    rng = np.random.default_rng(3)
    pl = np.array([pathloss_db(80.0, state, shadowing=rng) for _ in range(100_000)])
    assert pl.std(ddof=1) == pytest.approx(sigma, rel=0.02)


def test_channel_overrides():
    ch = ChannelParams.from_raw({"alpha_los_db": 60.0, "lambda_clusters": 2.5, "a_out": 0.03})
    assert ch.los.alpha_db == 60.0 and ch.los.beta == 2.0
    assert ch.lambda_clusters == 2.5 and ch.state.a_out == 0.03 and ch.state.b_out == 5.2


def test_channel_override_unknown_key():
    with pytest.raises(ValueError, match="bogus"):
        ChannelParams.from_raw({"bogus": 1})


# -- clusters -----------------------------------------------------------------------


def test_expected_cluster_count_enumeration():
    lam = 1.8
    brute = math.exp(-lam) * 1 + sum(k * math.exp(-lam) * lam ** k / math.factorial(k) for k in range(1, 60))
    assert expected_cluster_count(lam) == pytest.approx(brute, rel=1e-12)


def test_mean_cluster_count():
    n = 100_000
    _, link_of_cluster, _, _ = sample_cluster_batch(n, ChannelParams(), np.random.default_rng(0))
    k = np.bincount(link_of_cluster, minlength=n)
    se = k.std(ddof=1) / math.sqrt(n)
    assert abs(k.mean() - expected_cluster_count(1.8)) < 3 * se


@pytest.mark.parametrize("seed", range(20))
def test_cluster_invariants(seed):
    cs = sample_clusters(seed=seed)
    assert cs.n_clusters >= 1
    assert np.all((cs.counts >= 1) & (cs.counts <= 10))
    assert abs(cs.powers.sum() - 1.0) <= 1e-12
    assert np.all(cs.delays >= 0)
    assert np.all(np.abs(cs.aoa_el) <= np.pi / 2)
    assert np.all((cs.aod_az >= -np.pi) & (cs.aod_az < np.pi))
    assert sum(c.n_subpaths for c in cs.clusters) == cs.n_subpaths


def test_clusters_deterministic():
    a, b = sample_clusters(seed=9), sample_clusters(seed=9)
    for f in ("counts", "powers", "aoa_az", "aod_el", "delays"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_batch_powers_normalized_per_link():
    link, _, _, a = sample_cluster_batch(500, ChannelParams(), np.random.default_rng(2))
    np.testing.assert_allclose(np.bincount(link, weights=a["powers"]), 1.0, atol=1e-12)


# -- fading -------------------------------------------------------------------------


def test_fading_at_origin_is_sqrt_power():
    ch = random_instance(np.random.default_rng(0))
    g = small_scale_fading(0, 0, 0.0, 0.0, ch)
    assert g.imag == 0.0 and g.real == pytest.approx(math.sqrt(ch.clusters.powers[0]), rel=1e-15)


@given(t=st.floats(-1, 1), f=st.floats(-1e9, 1e9), seed=st.integers(0, 1000))
def test_fading_unit_modulus(t, f, seed):
    ch = random_instance(np.random.default_rng(seed))
    k = ch.clusters.n_clusters - 1
    g = small_scale_fading(k, 0, t, f, ch)
    assert abs(g) == pytest.approx(math.sqrt(ch.clusters.powers[ch.clusters.offset(k, 0)]), rel=1e-12)
    np.testing.assert_allclose(np.abs(subpath_gains(ch, t, f)), np.sqrt(ch.clusters.powers), rtol=1e-12)


def test_fading_doppler_phase():
    ch = sample_channel(50.0, speed=25.0, seed=1)
    assert ch.doppler_hz == pytest.approx(28e9 * 25 / 3e8, rel=1e-15)
    ch = ChannelInstance(ch.state, ch.pathloss_db, ch.clusters, ch.doppler_hz,
                         np.zeros(ch.clusters.n_subpaths))
    g = small_scale_fading(0, 0, 1e-3, 0.0, ch)
    expected = (2 * math.pi * 2.333333333333) % (2 * math.pi)
    assert cmath.phase(g) % (2 * math.pi) == pytest.approx(expected, abs=1e-9)


def test_fading_bad_index():
    ch = random_instance(np.random.default_rng(0))
    with pytest.raises(IndexError):
        small_scale_fading(ch.clusters.n_clusters, 0, 0.0, 0.0, ch)


# -- arrays -------------------------------------------------------------------------


def test_signature_single_element():
    np.testing.assert_array_equal(spatial_signature(AntennaArray(1, 1), 0.7, -0.2), [1.0])


def test_signature_boresight():
    np.testing.assert_allclose(spatial_signature(AntennaArray(2, 2), 0.0, 0.0), 0.5, atol=1e-15)


def test_signature_off_axis_overlap():
    a = AntennaArray(8, 8)
    ip = np.vdot(spatial_signature(a, 0.0, 0.0), spatial_signature(a, math.radians(30), 0.0))
    assert abs(ip) < 1.0


@pytest.mark.parametrize("rows,cols", [(1, 1), (2, 2), (4, 4), (8, 8), (2, 8), (3, 5)])
def test_signature_matches_loop(rows, cols):
    a = AntennaArray(rows, cols)
    rng = np.random.default_rng(rows * 10 + cols)
    for az, el in zip(rng.uniform(-np.pi, np.pi, 10), rng.uniform(-1.2, 1.2, 10)):
        u = spatial_signature(a, az, el)
        np.testing.assert_allclose(u, upa_loop(a, az, el), atol=1e-12)
        assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-12)


def test_signature_factors_kronecker():
    a = AntennaArray(4, 8)
    rng = np.random.default_rng(0)
    az, el = rng.uniform(-3, 3, 7), rng.uniform(-1, 1, 7)
    vert, horiz = signature_factors(a, az, el)
    u = spatial_signature(a, az, el)
    for i in range(7):
        np.testing.assert_allclose(np.kron(vert[i], horiz[i]) / math.sqrt(32), u[i], atol=1e-13)


@pytest.mark.parametrize("rows,cols", [(2, 2), (8, 8), (4, 1), (3, 7)])
def test_steering_overlap_matches_vdot(rows, cols):
    a = AntennaArray(rows, cols)
    rng = np.random.default_rng(rows + 7 * cols)
    az1, az2 = rng.uniform(-np.pi, np.pi, (2, 200))
    el1, el2 = rng.uniform(-0.8, 0.8, (2, 200))
    az2[:5], el2[:5] = az1[:5], el1[:5]  # coincident directions hit the kernel's limit
    got = steering_overlap(a, az1, el1, az2, el2)
    want = [np.vdot(spatial_signature(a, p, q), spatial_signature(a, r, s))
            for p, q, r, s in zip(az1, el1, az2, el2)]
    np.testing.assert_allclose(got, want, atol=1e-12)


# -- channel matrix -----------------------------------------------------------------


def naive_matrix(ch, tx, rx, t, f):
    cs = ch.clusters
    H = np.zeros((rx.n_elements, tx.n_elements), dtype=complex)
    for k in range(cs.n_clusters):
        for l in range(cs.counts[k]):
            i = cs.offset(k, l)
            g = small_scale_fading(k, l, t, f, ch)
            ur = upa_loop(rx, cs.aoa_az[i], cs.aoa_el[i])
            ut = upa_loop(tx, cs.aod_az[i], cs.aod_el[i])
            for a in range(rx.n_elements):
                for b in range(tx.n_elements):
                    H[a, b] += g * ur[a] * ut[b].conjugate()
    return H * math.sqrt(rx.n_elements * tx.n_elements / cs.n_subpaths)


def test_matrix_matches_naive_sum():
    rng = np.random.default_rng(42)
    shapes = [(AntennaArray(1, 1), AntennaArray(1, 1)), (AntennaArray(2, 2), AntennaArray(2, 2)),
              (AntennaArray(4, 2), AntennaArray(2, 1))]
    for i in range(100):
        ch = random_instance(rng)
        tx, rx = shapes[i % 3]
        t, f = rng.uniform(0, 1e-2), rng.uniform(-5e8, 5e8)
        np.testing.assert_allclose(assemble_channel_matrix(ch, (tx, rx), t, f),
                                   naive_matrix(ch, tx, rx, t, f), rtol=0, atol=1e-12)


def test_matrix_single_path_scalar():
    cs = ClusterSet(np.array([1]), np.array([1.0]), *np.zeros((4, 1)), np.array([3e-8]))
    ch = ChannelInstance(LinkState.NLOS, 90.0, cs, 0.0, np.zeros(1))
    H = assemble_channel_matrix(ch, (AntennaArray(1, 1), AntennaArray(1, 1)), 0.0, 1e7)
    assert H.shape == (1, 1)
    assert H[0, 0] == pytest.approx(small_scale_fading(0, 0, 0.0, 1e7, ch), abs=1e-15)


def test_matrix_shape_and_norm():
    for s in range(30):
        ch = sample_channel(30.0, seed=s)
        if ch.state == LinkState.OUTAGE:
            continue
        H = assemble_channel_matrix(ch, (AntennaArray(8, 8), AntennaArray(4, 4)))
        assert H.shape == (16, 64)
        assert 0 < np.linalg.norm(H) < np.inf


def test_matrix_outage_rejected():
    ch = random_instance(np.random.default_rng(0))
    ch = ChannelInstance(LinkState.OUTAGE, math.inf, ch.clusters, 0.0, ch.motion_angles)
    with pytest.raises(OutageError):
        assemble_channel_matrix(ch, (AntennaArray(2, 2), AntennaArray(2, 2)))


# -- beamforming --------------------------------------------------------------------


def unit(rng, n):
    z = rng.normal(size=n) + 1j * rng.normal(size=n)
    return z / np.linalg.norm(z)


def test_gain_scalar_case():
    w = BeamformingVectors(np.array([1.0 + 0j]), np.array([1.0 + 0j]))
    assert beamforming_gain(np.array([[0.3 - 0.4j]]), w) == pytest.approx(0.25)


def test_gain_dimension_mismatch():
    w = BeamformingVectors(np.ones(3), np.ones(2))
    with pytest.raises(ValueError):
        beamforming_gain(np.ones((2, 2)), w)


@pytest.mark.parametrize("seed", range(10))
def test_gain_bounds_and_alignment(seed):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(4, 6)) + 1j * rng.normal(size=(4, 6))
    smax2 = np.linalg.svd(H, compute_uv=False)[0] ** 2
    best = best_beam_pair(H)
    assert np.linalg.norm(best.w_tx) == pytest.approx(1.0) and np.linalg.norm(best.w_rx) == pytest.approx(1.0)
    g_best = beamforming_gain(H, best)
    assert g_best == pytest.approx(smax2, rel=1e-9)
    for _ in range(64):
        g = beamforming_gain(H, BeamformingVectors(unit(rng, 6), unit(rng, 4)))
        assert g <= smax2 * (1 + 1e-12)
        assert g <= g_best * (1 + 1e-12)


def test_gain_phase_invariance():
    rng = np.random.default_rng(5)
    H = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    w = BeamformingVectors(unit(rng, 3), unit(rng, 3))
    g = beamforming_gain(H, w)
    for phi in (0.3, 1.7, -2.9):
        rot = cmath.exp(1j * phi)
        assert beamforming_gain(H * rot, w) == pytest.approx(g, rel=1e-12)
        assert beamforming_gain(H, BeamformingVectors(w.w_tx * rot, w.w_rx)) == pytest.approx(g, rel=1e-12)
        assert beamforming_gain(H, BeamformingVectors(w.w_tx, w.w_rx * rot)) == pytest.approx(g, rel=1e-12)


def test_best_pair_rank_one():
    rng = np.random.default_rng(8)
    u, v = unit(rng, 4), unit(rng, 5)
    H = 3.0 * np.outer(u, v.conj())
    w = best_beam_pair(H)
    assert abs(np.vdot(u, w.w_rx)) == pytest.approx(1.0, abs=1e-12)
    assert abs(np.vdot(v, w.w_tx)) == pytest.approx(1.0, abs=1e-12)
    assert beamforming_gain(H, w) == pytest.approx(9.0, rel=1e-12)


def test_best_pair_zero_matrix():
    with pytest.raises(ValueError):
        best_beam_pair(np.zeros((2, 2)))
