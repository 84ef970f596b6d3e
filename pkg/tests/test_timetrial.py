import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erfinv
from scipy.stats import norm

from racer import timetrial as tt
from racer.errors import ConfigError
from racer.track import Track, TrackSegment, stadium_track
from racer.vehicle import EY, R, S, VX, VY, PlantConfig, VehicleParams, plant_step, with_overrides

P = VehicleParams.default()
IDENTICAL = PlantConfig(m_scale=1.0, izz_scale=1.0, substeps=1, tire="linear")


class ConstantGp:
    """Stands in for a fitted GP: same mean and variance everywhere."""

    def __init__(self, mean, var):
        self.mean = np.asarray(mean, dtype=float)
        self.var = np.asarray(var, dtype=float)

    def predict(self, Z):
        n = np.atleast_2d(Z).shape[0]
        return np.tile(self.mean, (n, 1)), np.tile(self.var, (n, 1))


def straight(length=200.0, width=5.0):
    return Track([TrackSegment("straight", length, 0.0)], w_l=width, w_r=-width, closed=False)


def cruise_state(v=10.0, ey=0.0):
    return np.array([v, 0.0, 0.0, 0.0, ey, 0.0])


# ------------------------------------------------------------ tightening
def test_tightening_zero_at_half():
    assert tt.tightening(0.3, 0.5) == 0.0
    assert tt.tightening(0.0, 0.9) == 0.0


def test_tightening_value():
    assert tt.tightening(0.1, 0.6) == pytest.approx(0.02533, abs=5e-6)
    assert tt.tightening(0.1, 0.6) == pytest.approx(math.sqrt(2) * 0.1 * erfinv(0.2), rel=1e-10)


@given(st.floats(1e-4, 5.0), st.floats(0.0, 10.0), st.floats(0.51, 0.99))
def test_tightening_linear_in_sigma(sigma, c, beta):
    assert tt.tightening(c * sigma, beta) == pytest.approx(c * tt.tightening(sigma, beta), rel=1e-9, abs=1e-12)


@given(st.floats(-0.999, 0.999))
def test_erfinv_bisect_matches_scipy(y):
    assert tt.erfinv_bisect(y) == pytest.approx(float(erfinv(y)), abs=1e-10)


def test_erf_variant_is_a_different_number():
    assert tt.tightening(1.0, 0.8, "erf") != pytest.approx(tt.tightening(1.0, 0.8))


def test_tightening_rejects_bad_input():
    with pytest.raises(ValueError):
        tt.tightening(-1.0, 0.6)
    with pytest.raises(ValueError):
        tt.tightening(1.0, 1.0)


def test_tightened_corridor_violation_rate():
    rng = np.random.default_rng(4)
    sigma, beta, w_l = 0.2, 0.6, 1.0
    gamma = tt.tightening(sigma, beta)
    e = (w_l - gamma) + sigma * rng.standard_normal(100_000)
    assert np.mean(e > w_l) <= (1 - beta) + 0.02
    assert 1 - norm.cdf(gamma / sigma) == pytest.approx(1 - beta, abs=1e-9)


# ------------------------------------------------------------ covariance
def test_covariance_identity_dynamics_accumulates():
    s = np.diag([0.0, 0.2, 0.1, 0.0, 0.0, 0.0])
    covs = tt.propagate_covariance([np.eye(6)] * 5, [s] * 5)
    for k, c in enumerate(covs, start=1):
        np.testing.assert_allclose(c, k * s)


def test_covariance_zero_noise():
    A = np.random.default_rng(0).normal(size=(6, 6))
    for c in tt.propagate_covariance([A] * 4, [np.zeros(2)] * 4):
        assert np.all(c == 0.0)


def test_covariance_two_vector_sits_on_gp_rows():
    c = tt.propagate_covariance([np.eye(6)], [np.array([0.3, 0.7])])[0]
    assert c[VY, VY] == 0.3 and c[R, R] == 0.7
    assert np.count_nonzero(c) == 2


def test_covariance_matches_monte_carlo():
    rng = np.random.default_rng(11)
    for _ in range(5):
        A_seq = []
        for _ in range(5):
            A = rng.normal(size=(6, 6))
            A_seq.append(0.9 * A / max(abs(np.linalg.eigvals(A))))
        sig = [np.diag(rng.uniform(0.01, 0.1, 6)) for _ in range(5)]
        cov = tt.propagate_covariance(A_seq, sig)[-1]
        x = np.zeros((100_000, 6))
        for A, s in zip(A_seq, sig):
            x = x @ A.T + rng.standard_normal(x.shape) * np.sqrt(np.diag(s))
        emp = np.cov(x.T)
        assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) < 0.05


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_covariance_symmetric_psd(seed, N):
    rng = np.random.default_rng(seed)
    A_seq = [rng.normal(size=(6, 6)) for _ in range(N)]
    sig = [rng.uniform(0, 1, 2) for _ in range(N)]
    for c in tt.propagate_covariance(A_seq, sig):
        np.testing.assert_array_equal(c, c.T)
        assert np.linalg.eigvalsh(c).min() >= -1e-9 * max(1.0, np.abs(c).max())


# ------------------------------------------------------------ residuals
def test_residual_zero_for_identical_plant():
    track = stadium_track()
    x = np.array([12.0, 0.3, 0.4, 0.05, 1.0, 30.0])
    u = np.array([0.05, 1.0])
    xn = plant_step(x, u, P, track, 0.05, IDENTICAL)
    res = tt.measure_residuals(x, u, xn, P, track, 0.05)
    np.testing.assert_allclose(res.y_mpc, 0.0, atol=1e-12)
    np.testing.assert_allclose(res.z, [0.3, 0.4, 0.05])


def test_residual_of_injected_bias():
    soft = with_overrides(P, C_af=500.0, C_ar=500.0)
    b = np.array([0.0, 0.4, -0.2, 0.0, 0.0, 0.0])
    cfg = PlantConfig(m_scale=1.0, izz_scale=1.0, substeps=1, tire="linear", bias=tuple(b))
    track = straight()
    x = cruise_state()
    u = np.zeros(2)
    T = 0.05
    res = tt.measure_residuals(x, u, plant_step(x, u, soft, track, T, cfg), soft, track, T)
    np.testing.assert_allclose(res.y_mpc, b[[VY, R]] * T, rtol=1e-9)


def test_planning_residual_is_rate():
    track = stadium_track()
    x = np.array([15.0, 0.1, 0.2, 0.0, 0.0, 50.0])
    u = np.array([0.04, 0.5])
    res = tt.measure_residuals(x, u, plant_step(x, u, P, track, 0.05), P, track, 0.05)
    np.testing.assert_allclose(res.y_plan * 0.05, res.y_mpc, rtol=1e-12)
    assert np.abs(res.y_mpc).max() > 0


def test_feature_mask_names():
    assert tt.feature_mask(("vy", "r", "delta")) == tt.FEATURE_MASK
    with pytest.raises(ConfigError):
        tt.TimeTrialConfig(gp_features=("vy", "yaw"))
    z = tt.features(cruise_state(), [0.1, 2.0], tt.feature_mask(("vx", "delta")))
    np.testing.assert_array_equal(z, [10.0, 0.1])


# ------------------------------------------------------------ tracking MPC
def _ref(track, x, N):
    X = np.tile(x, (N + 1, 1))
    X[:, S] = x[S] + x[VX] * 0.05 * np.arange(N + 1)
    return X, np.zeros(N)


def test_mpc_fixed_point_on_straight():
    p = with_overrides(P, c_r=0.0, C_xw=0.0)
    cfg = tt.TrackingMpcConfig()
    track = straight()
    x = cruise_state()
    nom = tt.nominal_trajectory(x, np.zeros((cfg.N, 2)), p, track, cfg.T, None)
    u, sol = tt.mpc_step(x, _ref(track, x, cfg.N), None, nom, cfg, track)
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.U, 0.0, atol=1e-6)


def test_tightening_grows_with_beta():
    track = straight()
    x = cruise_state()
    gp = ConstantGp([0.0, 0.0], [1e-3, 1e-3])
    gammas = []
    for beta in (0.5, 0.6, 0.8, 0.95):
        cfg = tt.TrackingMpcConfig(beta=beta)
        nom = tt.nominal_trajectory(x, np.zeros((cfg.N, 2)), P, track, cfg.T, gp)
        _, sol = tt.mpc_step(x, _ref(track, x, cfg.N), gp, nom, cfg, track)
        gammas.append(sol.gamma)
    assert np.all(gammas[0] == 0)
    for lo, hi in zip(gammas, gammas[1:]):
        assert np.all(hi >= lo) and np.any(hi > lo)


def test_gp_mean_shifts_nominal():
    track = straight()
    x = cruise_state()
    U = np.zeros((5, 2))
    plain = tt.nominal_trajectory(x, U, P, track, 0.05, None)
    b = np.array([0.01, -0.02])
    shifted = tt.nominal_trajectory(x, U, P, track, 0.05, ConstantGp(b, [0.0, 0.0]))
    np.testing.assert_allclose(shifted.X[1, [VY, R]] - plain.X[1, [VY, R]], b, atol=1e-12)
    np.testing.assert_allclose(shifted.X[1, [VX, EY]], plain.X[1, [VX, EY]], atol=1e-12)


def test_mpc_compensates_constant_bias():
    b = np.array([0.0, 0.02])
    track = straight()
    x = cruise_state()
    cfg = tt.TrackingMpcConfig()
    us = []
    for gp in (None, ConstantGp(b, [0.0, 0.0])):
        nom = tt.nominal_trajectory(x, np.zeros((cfg.N, 2)), P, track, cfg.T, gp)
        u, _ = tt.mpc_step(x, _ref(track, x, cfg.N), gp, nom, cfg, track)
        us.append(u)
    # a positive yaw disturbance is countered with negative steering
    assert us[1][0] < us[0][0] - 1e-4


def test_straight_line_tracking_converges():
    track = straight(500.0)
    cfg = tt.TrackingMpcConfig()
    x = cruise_state(ey=1.0)
    U = np.zeros((cfg.N, 2))
    prev, last = None, 0.0
    for _ in range(200):
        U = tt.shift_inputs(prev, U)
        nom = tt.nominal_trajectory(x, U, P, track, cfg.T, None)
        ref = _ref(track, cruise_state(), cfg.N)
        ref[0][:, S] = x[S] + 10.0 * cfg.T * np.arange(cfg.N + 1)
        u, prev = tt.mpc_step(x, ref, None, nom, cfg, track, last)
        last = float(u[0])
        x = plant_step(x, u, P, track, cfg.T)
    assert abs(x[EY]) < 1e-2


def test_mpc_config_validation():
    with pytest.raises(ConfigError):
        tt.TrackingMpcConfig(N=1)
    with pytest.raises(ConfigError):
        tt.TrackingMpcConfig(tightening="table")


# ------------------------------------------------------------ planner
def _slow_plan(track, n=50, v=10.0):
    s = np.arange(n) * track.length / n
    X = np.zeros((n, 5))
    X[:, VX] = v
    U = np.zeros((n, 2))
    return tt.PlannedTrajectory(s, X, U, track.length / v, "centerline")


def test_planner_straight_reaches_speed_cap():
    track = straight()
    ps = tt.PlannerSettings(n_points=50, v_max=20.0)
    # V_x moves at most trust[0] per iteration, so 10 -> 20 m/s needs 7 of them
    plan = tt.plan_min_time(track, None, _slow_plan(track), P, ps, iterations=8)
    assert plan.status == "optimal"
    assert plan.lap_time == pytest.approx(track.length / ps.v_max, rel=0.01)


def test_zero_mean_gp_changes_nothing():
    track = stadium_track()
    ps = tt.PlannerSettings()
    warm = tt.centerline_plan(track, P, ps)
    a = tt.plan_min_time(track, None, warm, P, ps, iterations=2)
    b = tt.plan_min_time(track, ConstantGp([0.0, 0.0], [1.0, 1.0]), warm, P, ps, iterations=2)
    np.testing.assert_array_equal(a.X, b.X)
    assert a.lap_time == b.lap_time


def test_plan_respects_width_and_closes():
    track = stadium_track()
    ps = tt.PlannerSettings()
    plan = tt.plan_min_time(track, None, tt.centerline_plan(track, P, ps), P, ps, iterations=4)
    w_l, w_r = track.width_at(plan.s)
    assert np.all(plan.X[:, EY] <= np.asarray(w_l) - ps.margin + 1e-5)
    assert np.all(plan.X[:, EY] >= np.asarray(w_r) + ps.margin - 1e-5)
    assert plan.lap_time < tt.centerline_plan(track, P, ps).lap_time
    # the periodic interpolant is continuous across the start line
    a, _ = plan.at(np.array([track.length - 1e-9]), track.length)
    b, _ = plan.at(np.array([0.0]), track.length)
    np.testing.assert_allclose(a[0, :5], b[0, :5], atol=1e-6)


def test_centerline_plan_is_steady_state():
    track = stadium_track()
    plan = tt.centerline_plan(track, P)
    kappa = np.asarray(track.curvature_at(plan.s))
    np.testing.assert_allclose(plan.X[:, R], kappa * plan.X[:, VX])
    assert plan.X[:, EY].max() == 0.0


def test_speed_profile_respects_limits():
    ps = tt.PlannerSettings()
    s, v = tt.speed_profile(stadium_track(), ps)
    ds = s[1] - s[0]
    assert v.max() <= ps.v_max and v.min() >= ps.v_min
    dv2 = np.diff(np.append(v, v[0]) ** 2) / (2 * ds)
    assert dv2.max() <= ps.a_accel + 1e-9
    assert dv2.min() >= -ps.a_brake - 1e-9


# ------------------------------------------------------------ laps
def test_lap_is_deterministic():
    track = stadium_track()
    cfg = tt.TimeTrialConfig()
    plan = tt.centerline_plan(track, P, cfg.planner)
    logs = [tt.run_lap(track, P, plan, None, 0.0, cfg, np.random.default_rng(3)) for _ in range(2)]
    np.testing.assert_array_equal(logs[0].array(), logs[1].array())
    assert math.isfinite(logs[0].lap_time_measured)
    assert not logs[0].aborted


def test_iteration_log_csv(tmp_path):
    log = tt.IterationLog(0, 0.5, [[0.0] * (len(tt.LOG_COLUMNS) - 1) + ["optimal"]], 11.0, 11.5, 3, 4)
    path = tmp_path / "it.csv"
    log.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == list(tt.LOG_COLUMNS)
    assert log.array().shape == (1, len(tt.LOG_COLUMNS) - 1)
