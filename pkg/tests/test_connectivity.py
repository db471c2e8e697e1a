import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from mmv2i import connectivity as cx
from mmv2i.coverage import CoverageResult
from mmv2i.units import AntennaArray, ScenarioParams

RHO, R, V, T = 0.01, 100.0, 25.0, 0.2

rhos = st.floats(1e-4, 0.5)
radii = st.floats(1.0, 1000.0)
speeds = st.floats(0.0, 60.0)
slots = st.floats(1e-3, 2.0)


# -- worked examples -------------------------------------------------------------------


def test_p_start_example():
    assert cx.p_start(RHO, R) == pytest.approx(0.8646647, abs=1e-7)


def test_p_no_leave_example():
    assert cx.p_no_leave(RHO, R, V, T) == pytest.approx(0.92285, abs=1e-5)


def test_p_no_leave_monte_carlo():
    rng = np.random.default_rng(0)
    d = rng.exponential(1 / RHO, 2_000_000)
    d = d[d < R]
    frac = np.mean(d / V > T)
    se = math.sqrt(frac * (1 - frac) / len(d))
    assert abs(frac - cx.p_no_leave(RHO, R, V, T)) < 3 * se


def test_p_nl_example():
    assert cx.p_nl(0.86466, 0.9228) == pytest.approx(0.79791, abs=1e-5)
    assert cx.p_nl(1.0, 1.0) == 1.0


def test_e_tl_example():
    # direct evaluation of (1 - e^{-0.05} 1.05) / (0.01 (1 - e^{-0.05})) / 25
    assert cx.e_tl(RHO, R, V, T) == pytest.approx(0.099167, abs=1e-6)


def test_e_tl_monte_carlo():
    rng = np.random.default_rng(1)
    step = V * T
    # inverse CDF of Exp(rho) truncated to [0, step)
    d = -np.log1p(rng.random(1_000_000) * math.expm1(-RHO * step)) / RHO
    tl = d / V
    se = tl.std(ddof=1) / math.sqrt(len(tl))
    assert abs(tl.mean() - cx.e_tl(RHO, R, V, T)) < 3 * se


def test_e_tcomm_example():
    ps, p, tl = 0.8646647, 0.9228497, 0.0991674
    want = ps * (p * T + (1 - p) * tl)
    assert want == pytest.approx(0.166206, abs=1e-6)
    assert cx.e_tcomm(RHO, R, V, T) == pytest.approx(want, abs=1e-6)


def test_displayed_variant():
    x = RHO * V * T
    want = (1 - math.exp(-RHO * R)) / (1 - math.exp(-x)) * (1 - math.exp(-x) * (1 + x)) / RHO / V
    assert cx.e_tl(RHO, R, V, T, cx.DISPLAYED) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        cx.e_tl(RHO, R, V, T, "other")


# -- identities, limits, bounds ------------------------------------------------------------


@given(rho=rhos, r=radii, v=speeds, t=slots)
def test_identities(rho, r, v, t):
    assume(v * t < r)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ps, p = cx.p_start(rho, r), cx.p_no_leave(rho, r, v, t)
    m = cx.evaluate(ScenarioParams(rho=rho, speed=v, slot_duration=t), r)
    assert m.p_nl == ps * p
    tl = cx.e_tl(rho, r, v, t) if v > 0 else 0.0
    assert abs(m.e_tcomm_s - ps * (p * t + (1 - p) * tl)) <= 1e-15
    assert 0.0 <= m.p_nl <= m.p_start <= 1.0
    assert 0.0 <= m.duration_ratio <= 1.0 + 1e-15
    if v > 0:
        assert 0.0 < m.e_tl_s < t


@given(x=st.floats(1e-9, 50))
def test_truncated_mean_fraction(x):
    # E[d | d < a] / a, by the closed form 1/x - 1/(e^x - 1) in extended precision
    with mpmath.workdps(60):
        want = float(1 / mpmath.mpf(x) - 1 / mpmath.expm1(mpmath.mpf(x)))
    assert float(cx._truncated_mean_fraction(x)) == pytest.approx(want, rel=1e-9)


def test_e_tl_small_step_limit():
    assert cx.e_tl(1e-6, 100.0, 1.0, 0.2) == pytest.approx(0.1, rel=1e-6)


def test_limits():
    assert cx.p_start(1e-12, 100.0) == pytest.approx(0.0, abs=1e-9)
    assert cx.p_start(0.01, 1e5) == 1.0
    m = cx.evaluate(ScenarioParams(rho=1e-12, speed=25, slot_duration=0.2), 100.0)
    assert m.p_nl < 1e-9 and m.e_tcomm_s < 1e-9
    assert cx.p_no_leave(RHO, R, 0.0, T) == 1.0
    assert cx.e_tcomm(RHO, R, 0.0, T) == pytest.approx(cx.p_start(RHO, R) * T, rel=1e-15)
    assert cx.e_tcomm(RHO, R, 1e-9, T) == pytest.approx(cx.p_start(RHO, R) * T, rel=1e-9)


def test_step_equal_radius():
    with pytest.warns(cx.ClampWarning):
        assert cx.p_no_leave(RHO, 5.0, V, T) == 0.0


def test_clamp_beyond_radius():
    with pytest.warns(cx.ClampWarning):
        assert cx.p_no_leave(RHO, 3.0, V, T) == 0.0


def test_e_tl_needs_motion():
    with pytest.raises(ValueError):
        cx.e_tl(RHO, R, 0.0, T)


def test_bad_inputs():
    with pytest.raises(ValueError):
        cx.p_start(0.0, 10.0)
    with pytest.raises(ValueError):
        cx.p_no_leave(RHO, R, -1.0, T)


@given(rho=rhos, r=radii, k=st.floats(1.0, 3.0))
def test_p_start_monotone(rho, r, k):
    assert cx.p_start(rho * k, r) >= cx.p_start(rho, r)
    assert cx.p_start(rho, r * k) >= cx.p_start(rho, r)


@given(rho=rhos, r=radii, v=speeds, t=slots, k=st.floats(1.0, 3.0))
def test_p_no_leave_monotone(rho, r, v, t, k):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", cx.ClampWarning)
        p = cx.p_no_leave(rho, r, v, t)
        assert cx.p_no_leave(rho, r, v * k, t) <= p
        assert cx.p_no_leave(rho, r, v, t * k) <= p


# -- geometry-consistent forms ---------------------------------------------------------------


@pytest.mark.parametrize("rho,r,v,t", [(0.005, 150, 25, 0.5), (0.02, 150, 8.33, 0.2), (0.08, 150, 36.1, 0.1)])
def test_geometric_forms_monte_carlo(rho, r, v, t):
    # two-sided picture: nearest IN ahead A and behind B, both Exp(rho);
    # served by the IN ahead whenever A <= R, leave by overtaking it
    rng = np.random.default_rng(3)
    n = 1_000_000
    a, b = rng.exponential(1 / rho, (2, n))
    conn = np.minimum(a, b) <= r
    leave = (a <= r) & (a < v * t)
    nl = conn & ~leave
    tc = np.where(conn, np.where(leave, a / v, t), 0.0)
    se_nl = math.sqrt(nl.mean() * (1 - nl.mean()) / n)
    assert abs(nl.mean() - cx.p_nl_geometric(rho, r, v, t)) < 3 * se_nl
    assert abs(tc.mean() - cx.e_tcomm_geometric(rho, r, v, t)) < 3 * tc.std() / math.sqrt(n)


# -- rate and throughput -------------------------------------------------------------------


def test_rate_from_sinr():
    assert cx.rate_from_sinr(0.0, 1e9) == 0.0
    assert cx.rate_from_sinr(1.0, 1e9) == pytest.approx(1e9)
    assert cx.rate_from_sinr(1e6, 1e9) == pytest.approx(7.4e9)


def test_throughput():
    assert cx.throughput(3e9, 0.0) == 0.0
    assert cx.throughput(1e9, 1.0) == 1e9


def test_rate_distance():
    assert cx.rate_distance(0.005, 150.0) == 150.0
    assert cx.rate_distance(0.02, 150.0) == pytest.approx(50.0)


def test_rate_grows_with_density():
    p = ScenarioParams(rho=0.02, speed=25, slot_duration=0.2, bs_array=AntennaArray(8, 8),
                       veh_array=AntennaArray(4, 4))
    sparse = cx.mean_rate(0.005, p, 150.0, 300, seed=1)
    dense = cx.mean_rate(0.02, p, 150.0, 300, seed=1)
    assert dense > sparse > 0


def test_averaged_rate_mode():
    p = ScenarioParams(rho=0.02, speed=25, slot_duration=0.2)
    a = cx.mean_rate(0.02, p, 150.0, 100, seed=4, averaged=True)
    assert a == cx.mean_rate(0.02, p, 150.0, 100, seed=4, averaged=True)
    assert 0 < a <= 7.4e9


# -- sweeps -----------------------------------------------------------------------------------


def grid(rho_km, v_kmh=90.0, t=0.2, bs=AntennaArray(8, 8), veh=AntennaArray(4, 4)):
    return [ScenarioParams(rho=r / 1000, speed=v_kmh / 3.6, slot_duration=t, bs_array=bs, veh_array=veh)
            for r in rho_km]


def test_sweep_trends():
    rk = np.arange(1, 201, dtype=float)
    p_nl = np.array([m.p_nl for m in cx.metrics_sweep(grid(rk), 150.0)])
    top = int(np.argmax(p_nl))
    assert 0 < top < len(rk) - 1
    assert np.all(np.diff(p_nl[: top + 1]) >= 0) and np.all(np.diff(p_nl[top:]) <= 0)
    slow = [m.p_nl for m in cx.metrics_sweep(grid(rk, 30.0), 150.0)]
    assert np.all(np.array(slow) >= p_nl)
    short = [m.duration_ratio for m in cx.metrics_sweep(grid(rk, t=0.1), 150.0)]
    long = [m.duration_ratio for m in cx.metrics_sweep(grid(rk, t=0.5), 150.0)]
    assert np.all(np.array(short) >= np.array(long))


def test_sweep_missing_radius():
    table = cx.RCommTable([CoverageResult(170.0, 3.0, 0.01, 64, 16, 100, AntennaArray(8, 8),
                                          AntennaArray(4, 4))])
    rows = cx.metrics_sweep(grid([10.0]), table)
    assert rows[0].r_comm_m == 170.0 and rows[0].rho_per_km == 10.0
    with pytest.raises(cx.MissingRCommError) as exc:
        cx.metrics_sweep(grid([10.0, 30.0]), table)
    assert exc.value.densities == [30.0]
    assert "rho=30/km" in str(exc.value)
    with pytest.raises(ValueError):
        cx.metrics_sweep([], 150.0)


def test_sweep_shares_rates():
    rows = cx.metrics_sweep(grid([20.0]) + grid([20.0], 30.0), 150.0, with_rate=True, n_rate_samples=100)
    assert rows[0].rate_bps == rows[1].rate_bps > 0
    assert rows[0].throughput_bps == pytest.approx(rows[0].rate_bps * rows[0].duration_ratio)


def test_metrics_csv_header():
    text = cx.metrics_csv(cx.metrics_sweep(grid([10.0, 20.0]), 150.0))
    lines = text.splitlines()
    assert lines[0].split(",") == cx.CSV_COLUMNS
    assert lines[1].split(",")[:6] == ["10.0", "90.0", "0.2", "64", "16", "150.0"]
