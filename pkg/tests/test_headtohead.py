import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from racer import headtohead as hh
from racer.errors import ConfigError
from racer.explore import CandidateGrid, ExplorationConfig, StalemateTracker
from racer.gp import MATERN, GpDataset, KernelSpec, fit
from racer.track import Track, TrackSegment
from racer.vehicle import VehicleParams

P = VehicleParams.miniature()


def straight(length=80.0, width=0.7):
    return Track([TrackSegment("straight", length, 0.0)], w_l=width, w_r=-width, closed=False)


def arc(length=100.0, kappa=0.05, width=0.7):
    return Track([TrackSegment("arc", length, kappa)], w_l=width, w_r=-width, closed=False)


def ego(s=5.0, ey=0.0, vx=2.0, epsi=0.0):
    return np.array([vx, 0.0, 0.0, epsi, ey, s])


class ConstantModel:
    """Opponent model with fixed increments and variances."""

    def __init__(self, mu, var):
        self.mu = np.asarray(mu, float)
        self.var = np.asarray(var, float)

    def predict(self, Z):
        n = len(np.atleast_2d(Z))
        return np.tile(self.mu, (n, 1)), np.tile(self.var, (n, 1))


class Frozen:
    def step(self, xo, x_ego, track):
        return np.zeros(2)


def random_gp(rng, n=40, y=None):
    Z = rng.normal(size=(n, hh.N_FEATURES))
    Y = rng.normal(size=(n, 4)) * 0.3 if y is None else np.tile(y, (n, 1))
    kern = KernelSpec(MATERN, 0.7, tuple(rng.uniform(0.5, 2.0, hh.N_FEATURES)))
    return fit(GpDataset.from_arrays(Z, Y), kern, 0.01)


# ------------------------------------------------------------ features
def test_features_example():
    z = hh.opponent_features(ego(10.0, 0.2, 2.0, 0.05), [12.0, -0.1, 0.0, 1.8], straight())
    np.testing.assert_allclose(z, [2.0, -0.3, 0.05, 2.0, 0.0, 1.8, 0.0, 0.0, 0.0], atol=1e-12)


def test_features_identical_pose():
    z = hh.opponent_features(ego(7.0, 0.1), [7.0, 0.1, 0.0, 2.0], straight())
    assert z[0] == 0.0 and z[1] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 30), st.floats(0, 5), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0, 40))
def test_features_translation_invariant(s, gap, ey, eyo, c):
    track = arc()
    a = hh.opponent_features(ego(s, ey), [s + gap, eyo, 0.1, 2.0], track)
    b = hh.opponent_features(ego(s + c, ey), [s + gap + c, eyo, 0.1, 2.0], track)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_features_curvature_lookahead():
    track = Track([TrackSegment("straight", 10.0, 0.0), TrackSegment("arc", 50.0, 0.1)],
                  w_l=0.7, w_r=-0.7, closed=False)
    z = hh.opponent_features(ego(0.0), [3.0, 0.0, 0.0, 2.0], track)
    np.testing.assert_allclose(z[6:], [0.0, 0.1, 0.1])


# ------------------------------------------------------------ opponent model
def test_zero_delta_fixed_point():
    gp = random_gp(np.random.default_rng(0), y=np.zeros(4))
    model = hh.OpponentModel(gp, (0.25, 0.02, 0.05, 0.05))
    xo = np.array([3.0, 0.2, 0.05, 2.0])
    mu, var = hh.opponent_gp_step(model, np.random.default_rng(1).normal(size=9), xo)
    np.testing.assert_allclose(mu, xo, atol=1e-12)
    assert np.all(var >= 0)


def test_opponent_model_matches_gp():
    rng = np.random.default_rng(2)
    gp = random_gp(rng)
    scale = np.array([0.25, 0.02, 0.05, 0.05])
    model = hh.OpponentModel(gp, scale)
    Zq = rng.normal(size=(30, 9))
    mu, var = model.predict(Zq)
    mu_ref, var_ref = gp.predict(Zq)
    np.testing.assert_allclose(mu, mu_ref * scale, atol=1e-12)
    np.testing.assert_allclose(var, var_ref * scale ** 2, atol=1e-10)


def test_opponent_model_chunks():
    rng = np.random.default_rng(3)
    model = hh.OpponentModel(random_gp(rng), np.ones(4))
    Zq = rng.normal(size=(25, 9))
    a = model.predict(Zq)
    b = model.predict(Zq, chunk=4)
    np.testing.assert_allclose(a[0], b[0], atol=1e-14)
    np.testing.assert_allclose(a[1], b[1], atol=1e-14)


def test_far_field_variance_is_prior():
    gp = random_gp(np.random.default_rng(4))
    scale = np.array([0.25, 0.02, 0.05, 0.05])
    _, var = hh.OpponentModel(gp, scale).predict(np.full((1, 9), 1e3))
    np.testing.assert_allclose(var[0], gp.kernel.variance * scale ** 2, rtol=1e-9)


def test_constant_velocity_model():
    z = np.array([[1.0, 0.0, 0.0, 2.0, 0.1, 2.0, 0, 0, 0]])
    mu, var = hh.ConstantVelocityOpponent(0.1).predict(z)
    np.testing.assert_allclose(mu[0], [0.2 * math.cos(0.1), 0.2 * math.sin(0.1), 0.0, 0.0])
    assert np.all(var == 0)


# ------------------------------------------------------------ sampled prediction
def plan_for(x, N=10):
    return np.tile(x, (N + 1, 1))


def test_zero_variance_rollout():
    model = ConstantModel([0.2, 0.01, 0.0, 0.0], np.zeros(4))
    xo = np.array([3.0, 0.0, 0.0, 2.0])
    mean, var = hh.predict_opponent(model, xo, plan_for(ego()), straight(), 10, 7, 0)
    np.testing.assert_allclose(var, 0.0, atol=1e-20)
    k = np.arange(1, 11)
    np.testing.assert_allclose(mean[:, 0], 3.0 + 0.2 * k)
    np.testing.assert_allclose(mean[:, 1], 0.01 * k)


def test_single_sample_is_its_rollout():
    model = ConstantModel([0.2, 0.0, 0.0, 0.0], [1e-3, 1e-4, 0.0, 0.0])
    xo = np.array([3.0, 0.0, 0.0, 2.0])
    mean, var = hh.predict_opponent(model, xo, plan_for(ego()), straight(), 10, 1, 5)
    rng = np.random.default_rng(5)
    state = xo.copy()
    for k in range(10):
        state = state + model.mu + np.sqrt(model.var) * rng.standard_normal((1, 4))[0]
        np.testing.assert_allclose(mean[k], state, atol=1e-14)
    assert np.all(var == 0)


def test_prediction_deterministic():
    model = hh.OpponentModel(random_gp(np.random.default_rng(6)), (0.25, 0.02, 0.05, 0.05))
    xo = np.array([3.0, 0.1, 0.0, 2.0])
    a = hh.predict_opponent(model, xo, plan_for(ego()), straight(), 10, 20, 11)
    b = hh.predict_opponent(model, xo, plan_for(ego()), straight(), 10, 20, 11)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert np.all(a[1] >= 0)


def test_prediction_mean_converges():
    model = ConstantModel([0.2, 0.0, 0.0, 0.0], [4e-4, 1e-4, 1e-4, 1e-4])
    xo = np.array([3.0, 0.0, 0.0, 2.0])
    m50, _ = hh.predict_opponent(model, xo, plan_for(ego()), straight(), 10, 50, 0)
    m5k, v5k = hh.predict_opponent(model, xo, plan_for(ego()), straight(), 10, 5000, 1)
    assert np.all(np.abs(m50 - m5k) < 3.0 * np.sqrt(v5k) / math.sqrt(50))


def test_prediction_needs_full_plan():
    with pytest.raises(ConfigError):
        hh.predict_opponent(ConstantModel(np.zeros(4), np.zeros(4)), np.zeros(4),
                            np.zeros((5, 6)), straight(), 10, 3, 0)


# ------------------------------------------------------------ ellipses
def test_covering_ellipse_example():
    cfg = hh.H2hConfig(ego_length=1e-12, ego_width=1e-12)
    e = hh.collision_ellipses(np.zeros((1, 4)), np.zeros((1, 4)), cfg)[0]
    assert e.a == pytest.approx(0.2121, abs=1e-4)
    assert e.b == pytest.approx(0.1414, abs=1e-4)


def test_covering_ellipse_contains_rectangle():
    a, b = hh.covering_axes(0.3, 0.2)
    assert (0.15 / a) ** 2 + (0.1 / b) ** 2 == pytest.approx(1.0)


def test_ellipses_monotone_in_std():
    var = np.linspace(0, 0.04, 10)[:, None] * np.ones(4)
    ell = hh.collision_ellipses(np.zeros((10, 4)), var, hh.H2hConfig())
    a = [e.a for e in ell]
    b = [e.b for e in ell]
    assert np.all(np.diff(a) >= 0) and np.all(np.diff(b) >= 0)
    assert a[-1] > a[0]


def test_ellipses_ignore_variance_without_inflation():
    cfg = hh.H2hConfig(n_sigma=0.0)
    lo = hh.collision_ellipses(np.zeros((3, 4)), np.zeros((3, 4)), cfg)
    hi = hh.collision_ellipses(np.zeros((3, 4)), np.ones((3, 4)), cfg)
    assert [(e.a, e.b) for e in lo] == [(e.a, e.b) for e in hi]


def test_hard_collision_boundary():
    cfg = hh.H2hConfig()
    a = hh.covering_axes(cfg.opp_length, cfg.opp_width)[0] + cfg.ego_length / 2
    track = straight()
    assert hh.hard_collision(ego(5.0), [5.0 + 0.99 * a, 0.0, 0.0, 2.0], cfg, track)
    assert not hh.hard_collision(ego(5.0), [5.0 + 1.01 * a, 0.0, 0.0, 2.0], cfg, track)


# ------------------------------------------------------------ ego MPC
def cv_prediction(x, xo, track, cfg):
    return hh.predict_opponent(hh.ConstantVelocityOpponent(cfg.T), xo, plan_for(x), track, cfg.N, 1, 0)


def test_pure_racing_makes_progress():
    cfg, track = hh.H2hConfig(), straight()
    x = ego(5.0, 0.0, 2.0)
    xo = np.array([50.0, 0.0, 0.0, 2.0])
    u, sol = hh.h2h_mpc_step(x, cv_prediction(x, xo, track, cfg), None, None, 0.0, cfg, track, P)
    assert sol.status == "optimal"
    assert np.all(np.diff(sol.X[:, 5]) > 0)
    assert sol.X[-1, 5] > x[5]
    assert sol.slack_total <= 1e-6
    assert u[1] > 0


def test_stationkeeping_on_reference():
    cfg, track = hh.H2hConfig(), straight()
    x = ego(5.0, 0.1, 0.0)
    xo = np.array([50.0, 0.0, 0.0, 2.0])
    ref = np.tile(x, (cfg.N, 1))
    u, sol = hh.h2h_mpc_step(x, cv_prediction(x, xo, track, cfg), None, ref, 1.0, cfg, track, P)
    assert np.max(np.abs(u)) < 1e-3


def min_center_distance(sol, mean):
    return min(math.hypot(sol.X[k + 1, 5] - mean[k, 0], sol.X[k + 1, 4] - mean[k, 1]) for k in range(len(mean)))


def test_ellipse_pushes_plan_away():
    cfg, track = hh.H2hConfig(), straight()
    free = hh.H2hConfig(w1=0.0, w2=0.0)
    x = ego(5.0, 0.0, 3.0)
    # a small lateral offset; exactly on the centre line the linearized ellipse has no lateral gradient
    xo = np.array([5.35, 0.02, 0.0, 1.5])
    pred = cv_prediction(x, xo, track, cfg)
    _, sol = hh.h2h_mpc_step(x, pred, None, None, 0.0, cfg, track, P)
    _, sol_free = hh.h2h_mpc_step(x, pred, None, None, 0.0, free, track, P)
    ell = hh.collision_ellipses(pred[0], pred[1], cfg)
    h = [1 - ((sol.X[k + 1, 5] - e.s) / e.a) ** 2 - ((sol.X[k + 1, 4] - e.ey) / e.b) ** 2 for k, e in enumerate(ell)]
    assert np.all(np.asarray(h) <= sol.slack + 1e-9)
    assert sol.slack_total > 0
    assert min_center_distance(sol, pred[0]) > min_center_distance(sol_free, pred[0])


def test_slack_zero_when_clear():
    cfg, track = hh.H2hConfig(), straight()
    x = ego(5.0, -0.4, 2.5)
    xo = np.array([12.0, 0.4, 0.0, 2.0])
    _, sol = hh.h2h_mpc_step(x, cv_prediction(x, xo, track, cfg), None, None, 0.0, cfg, track, P)
    assert sol.status == "optimal"
    assert np.all(sol.slack <= 1e-6)


def test_plan_respects_track():
    cfg, track = hh.H2hConfig(), straight()
    x = ego(5.0, 0.3, 3.0)
    xo = np.array([5.8, 0.3, 0.0, 2.0])
    _, sol = hh.h2h_mpc_step(x, cv_prediction(x, xo, track, cfg), None, None, 0.0, cfg, track, P)
    half = cfg.ego_width / 2
    assert np.all(np.abs(sol.X[1:, 4]) <= 0.7 - half + 1e-3)
    assert np.all(sol.U[:, 0] >= cfg.u_min[0] - 1e-6) and np.all(sol.U[:, 0] <= cfg.u_max[0] + 1e-6)


def test_braking_fallback_stops_without_reversing():
    cfg = hh.H2hConfig()
    u, sol = hh._ego_braking(ego(vx=0.1), cfg)
    assert sol.fallback and u[0] == 0.0
    assert u[1] == pytest.approx(-1.0)
    assert hh._ego_braking(ego(vx=3.0), cfg)[0][1] == cfg.u_min[1]


def test_mpc_rejects_bad_alpha():
    cfg, track = hh.H2hConfig(), straight()
    with pytest.raises(ConfigError):
        hh.h2h_mpc_step(ego(), (np.zeros((10, 4)), np.zeros((10, 4))), None, None, 1.5, cfg, track, P)


def test_config_validation():
    with pytest.raises(ConfigError):
        hh.H2hConfig(n_samples=0)
    with pytest.raises(ConfigError):
        hh.H2hConfig(w1=-1.0)
    with pytest.raises(ConfigError):
        hh.H2hConfig(ego_width=0.0)
    with pytest.raises(ConfigError):
        hh.OpponentConfig(q_b=-1.0)


# ------------------------------------------------------------ blocking opponent
def simulate_opponent(config, ey_ego=0.3, s_ego=2.0, seconds=3.0):
    track = straight()
    opp = hh.BlockingOpponent(config, 0.1, 0.2)
    xo = np.array([5.0, 0.0, 0.0, 2.0])
    x = ego(s_ego, ey_ego)
    trace = []
    for _ in range(int(round(seconds / 0.1))):
        u = opp.step(xo, x, track)
        xo = hh._kin_step(xo, u, 0.1, config, track)
        trace.append(xo.copy())
    return np.array(trace)


def test_opponent_mirrors_ego():
    trace = simulate_opponent(hh.OpponentConfig())
    assert abs(trace[-1, 1] - 0.3) < 0.05


def test_opponent_mirrors_even_far_ahead():
    trace = simulate_opponent(hh.OpponentConfig(), s_ego=-40.0)
    assert abs(trace[-1, 1] - 0.3) < 0.05


def test_opponent_without_blocking_races_centre():
    trace = simulate_opponent(hh.OpponentConfig(q_b=0.0))
    assert np.max(np.abs(trace[:, 1])) < 0.02
    assert trace[-1, 3] > 2.0


def test_opponent_respects_limits():
    cfg = hh.OpponentConfig()
    trace = simulate_opponent(cfg, ey_ego=0.9, seconds=4.0)
    assert np.all(trace[:, 1] <= 0.7 - 0.1 + 1e-3)
    assert np.all(trace[:, 3] <= cfg.v_max + 1e-6)


# ------------------------------------------------------------ exploration reference
def single_target_state(target):
    target = np.asarray(target, float)
    grid = CandidateGrid(target[None, :], tuple(np.array([v]) for v in target), np.ones(9), np.zeros(1))
    return hh.ExplorationState(grid, StalemateTracker(ExplorationConfig()))


def test_reference_fixed_point():
    cfg, track = hh.H2hConfig(), straight()
    x = ego(5.0, 0.1, 2.0)
    xo = np.array([6.0, -0.1, 0.0, 2.0])
    z = hh.opponent_features(x, xo, track)
    mean = np.array([[6.0 + 0.2 * k, -0.1, 0.0, 2.0] for k in range(1, 11)])
    ref = hh.exploration_reference(x, xo, mean, single_target_state(z), 0.9, cfg, track)
    np.testing.assert_allclose(ref[:, 5], mean[:, 0] - z[0])
    np.testing.assert_allclose(ref[:, 4], mean[:, 1] - z[1])
    np.testing.assert_allclose(ref[:, 0], x[0])


def test_reference_ahead_when_target_leads():
    cfg, track = hh.H2hConfig(), straight()
    target = np.zeros(9)
    target[0] = -0.8
    mean = np.array([[6.0 + 0.2 * k, 0.0, 0.0, 2.0] for k in range(1, 11)])
    ref = hh.exploration_reference(ego(), [6.0, 0.0, 0.0, 2.0], mean, single_target_state(target), 0.9, cfg, track)
    assert np.all(ref[:, 5] > mean[:, 0])


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-0.7, 0.7))
def test_reference_clipped_to_track(dey, opp_ey):
    cfg, track = hh.H2hConfig(), straight()
    target = np.zeros(9)
    target[1] = dey
    mean = np.array([[6.0 + 0.2 * k, opp_ey, 0.0, 2.0] for k in range(1, 11)])
    ref = hh.exploration_reference(ego(), [6.0, opp_ey, 0.0, 2.0], mean, single_target_state(target), 0.9,
                                   cfg, track)
    half = cfg.ego_width / 2
    assert np.all(ref[:, 4] >= -0.7 + half - 1e-12) and np.all(ref[:, 4] <= 0.7 - half + 1e-12)


# ------------------------------------------------------------ races
@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-2.0, 2.0), min_size=2, max_size=40))
def test_overtake_hysteresis(leads):
    gap = 0.3
    det = hh.OvertakeDetector(gap, 0.1)
    flagged = math.inf
    for i in range(1, len(leads)):
        t = det.update(0.1 * (i - 1), leads[i - 1], leads[i])
        if math.isinf(flagged) and leads[i] > gap:
            assert 0.1 * (i - 1) <= t <= 0.1 * i
            flagged = t
        elif not math.isinf(flagged):
            if leads[i] < gap / 2:
                assert math.isinf(t)
                flagged = math.inf
            else:
                assert t == flagged


def test_overtake_interpolation():
    det = hh.OvertakeDetector(0.3, 0.1)
    assert det.update(1.0, 0.2, 0.4) == pytest.approx(1.05)


def test_frozen_opponent_gets_overtaken():
    cfg, track = hh.H2hConfig(), straight(60.0)
    log = hh.run_race(track, ego(0.5, 0.0, 2.0), [3.0, 0.0, 0.0, 0.0], None, 0.0, cfg, 0, opponent=Frozen())
    assert log.overtaken and log.end_reason == "overtaken"
    assert log.collisions == 0
    assert log.overtake_time < 10.0


def test_race_requires_ego_behind():
    with pytest.raises(ConfigError):
        hh.run_race(straight(), ego(5.0), [4.0, 0.0, 0.0, 2.0], None, 0.0, hh.H2hConfig(), 0)


def test_race_deterministic_and_logged(tmp_path):
    cfg = hh.H2hConfig()
    track = straight(40.0)

    def race():
        return hh.run_race(track, ego(0.5), [2.5, 0.1, 0.0, 2.0], None, 0.0, cfg, 3, duration=3.0)

    a, b = race(), race()
    np.testing.assert_array_equal(a.array(), b.array())
    np.testing.assert_array_equal(a.features, b.features)
    assert len(a.rows) == len(a.features) == len(a.deltas) == len(a.opp_states) - 1
    np.testing.assert_allclose(a.deltas, np.diff(a.opp_states, axis=0))
    np.testing.assert_allclose(a.features[0], hh.opponent_features(ego(0.5), [2.5, 0.1, 0.0, 2.0], track))
    path = tmp_path / "race.csv"
    a.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == hh.LOG_COLUMNS and len(lines) == len(a.rows) + 1
    a.write_plans_csv(tmp_path / "plans.csv")
    assert len((tmp_path / "plans.csv").read_text().splitlines()) == len(a.rows) * (cfg.N + 1) + 1


def test_race_feeds_selector():
    cfg = hh.H2hConfig()
    learner = hh.OpponentLearner.empty(cfg)
    log = hh.run_race(straight(40.0), ego(0.5), [2.5, 0.0, 0.0, 2.0], None, 0.0, cfg, 0,
                      selector=learner.selector(), duration=1.0)
    assert len(learner.data) == len(log.features)
    np.testing.assert_allclose(learner.data.Y, log.deltas / np.asarray(cfg.delta_scale))


def test_prediction_errors_exact_model():
    cfg, track = hh.H2hConfig(), straight(60.0)
    log = hh.run_race(track, ego(0.5), [3.0, 0.2, 0.0, 0.0], None, 0.0, cfg, 0, opponent=Frozen(), duration=2.0)
    errs = hh.prediction_errors(hh.ConstantVelocityOpponent(cfg.T), [log], cfg)
    assert len(errs) == cfg.N
    assert all(np.all(e < 1e-12) for e in errs)
    assert errs[0].size == len(log.features)
    assert errs[4].size == len(log.features) - 4


def test_summarize_errors():
    mean, std = hh.summarize_errors([np.array([1.0, 3.0]), np.array([])])
    assert mean[0] == 2.0 and std[0] == 1.0 and math.isnan(mean[1])


def test_exploration_widens_visited_configurations():
    cfg = hh.H2hConfig()
    track = straight(70.0)
    learner = hh.OpponentLearner.empty(cfg)
    base = hh.run_race(track, ego(0.5), [2.5, 0.0, 0.0, 2.0], None, 0.0, cfg, 1,
                       selector=learner.selector(), duration=6.0)
    learner.refit(0, optimize=True, restarts=1)
    grid = hh.exploration_grid(learner.data, learner.gp, cfg)
    state = hh.ExplorationState(grid, StalemateTracker(cfg.exploration))
    explored = hh.run_race(track, ego(0.5), [2.5, 0.0, 0.0, 2.0], learner.model(), 0.9, cfg, 1,
                           exploration=state, duration=6.0)
    passive = hh.run_race(track, ego(0.5), [2.5, 0.0, 0.0, 2.0], learner.model(), 0.0, cfg, 1, duration=6.0)

    def box(log):
        f = log.features[:, :2]
        return np.prod(f.max(axis=0) - f.min(axis=0))

    assert len(base.features) > 0
    assert box(explored) > box(passive)
    assert np.all(explored.array()[:, hh.LOG_COLUMNS.index("target_index")] >= 0)


def test_protocol_smoke():
    proto = hh.H2hProtocol(n_initial=1, n_baseline=2, explore_duration=2.0, n_eval=1, gp_restarts=1)
    rep = hh.run_protocol(0, proto)
    assert rep.explore_size > 0 and rep.baseline_size >= rep.explore_size - 20
    assert len(rep.eval_explore) == len(rep.eval_baseline) == 1
    assert len(rep.err_explore) == hh.H2hConfig().N
    with pytest.raises(ConfigError):
        hh.H2hProtocol(n_initial=5, n_baseline=2)
