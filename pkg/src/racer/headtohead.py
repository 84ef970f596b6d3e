"""Head-to-head racing against a blocking opponent.

The ego car solves a short-horizon SQP that trades progress against soft
elliptical clearance from a sampled GP prediction of the opponent, and can
steer towards informative relative configurations. The opponent is a
kinematic car whose MPC mirrors the ego's lateral position.

Opponent states are ``[s, e_y, e_psi, v]``; the GP maps relative features to
one-step state increments.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .dataselect import SelectionPolicy, Selector
from .errors import ConfigError, NearSingularFrenet
from .explore import (
    CandidateGrid, ExplorationConfig, StalemateTracker, build_grid, precompute_variances, select_target,
)
from .gp import MATERN, GpDataset, GpModel, HyperFit, fit, optimize_hyperparameters
from .solver import DEGRADED, OPTIMAL, QpProblem, QpSettings, SqpSettings, sqp_solve, solve_qp
from .timetrial import Nominal, condense
from .track import Track, TrackGenSpec, random_track
from .vehicle import EPSI, EY, R, S, VX, VY, PlantConfig, VehicleParams, plant_step

OS, OEY, OEPSI, OV = range(4)
N_FEATURES = 9
# feature columns the ego can influence: ds, dey, e_psi, V_x
CONTROLLABLE = (0, 1, 2, 3)


# ------------------------------------------------------------ configuration
@dataclass(frozen=True)
class OpponentConfig:
    N: int = 10
    q_c: float = 0.1
    q_s: float = 0.05
    q_b: float = 10.0
    R: tuple = (0.1, 0.01)
    R_d: tuple = (5.0, 0.1)
    v_max: float = 2.2
    u_min: tuple = (-0.2, -3.0)
    u_max: tuple = (0.2, 1.5)
    wheelbase: float = 0.2
    substeps: int = 5

    def __post_init__(self):
        if min(self.q_c, self.q_s, self.q_b, *self.R, *self.R_d) < 0:
            raise ConfigError("opponent weights must be nonnegative")


@dataclass(frozen=True)
class H2hConfig:
    N: int = 10
    T: float = 0.1
    q_c: float = 0.1
    q_s: float = 0.1
    R: tuple = (0.1, 0.01)
    R_d: tuple = (1.0, 0.1)
    # exploration tracking weights on [V_x, V_y, r, e_psi, e_y, s]
    Q: tuple = (1.0, 0.0, 0.0, 1.0, 10.0, 10.0)
    n_samples: int = 50
    n_sigma: float = 2.0
    w1: float = 10.0
    w2: float = 100.0
    # extra margin on both ellipse semi-axes inside the MPC only
    clearance: float = 0.05
    ego_length: float = 0.3
    ego_width: float = 0.2
    opp_length: float = 0.3
    opp_width: float = 0.2
    v_max: float = 3.5
    u_min: tuple = (-0.4, -3.0)
    u_max: tuple = (0.4, 2.0)
    sqp_iterations: int = 2
    trust: tuple = (0.15, 1.5)
    substeps: int = 10
    lookahead: tuple = (5.0, 10.0, 15.0)
    delta_scale: tuple = (0.25, 0.02, 0.05, 0.05)
    capacity: int = 500
    start_gap: tuple = (1.5, 3.0)
    overtake_hold: float = 1.5
    end_margin: float = 1.0
    max_duration: float = 40.0
    opponent: OpponentConfig = field(default_factory=OpponentConfig)
    plant: PlantConfig = field(default_factory=lambda: PlantConfig(substeps=20))
    exploration: ExplorationConfig = field(default_factory=lambda: ExplorationConfig(alphas=(0.9,)))
    qp: QpSettings = field(default_factory=lambda: QpSettings(max_iter=4000))

    def __post_init__(self):
        if self.N < 1 or self.n_samples < 1:
            raise ConfigError("need N >= 1 and n_samples >= 1")
        weights = (self.q_c, self.q_s, self.n_sigma, self.w1, self.w2, self.clearance, *self.R, *self.R_d, *self.Q)
        if min(weights) < 0:
            raise ConfigError("weights must be nonnegative")
        if min(self.ego_length, self.ego_width, self.opp_length, self.opp_width) <= 0:
            raise ConfigError("car dimensions must be positive")
        if len(self.Q) != 6 or len(self.lookahead) != 3 or len(self.delta_scale) != 4:
            raise ConfigError("Q needs 6 entries, lookahead 3, delta_scale 4")

    @property
    def overtake_gap(self) -> float:
        return 0.5 * (self.ego_length + self.opp_length)


# ------------------------------------------------------------ features
def _ds(track: Track, a, b):
    """Arc-length difference a - b, shortest way round on closed tracks."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if track.closed:
        L = track.length
        d = (d + 0.5 * L) % L - 0.5 * L
    return d


def opponent_features(x, xo, track: Track, lookahead=(5.0, 10.0, 15.0)) -> np.ndarray:
    """[ds, dey, e_psi, V_x, e_psi^O, V^O, curvature at three points ahead of the opponent]."""
    return _features_batch(np.asarray(x, float), np.atleast_2d(np.asarray(xo, float)), track, lookahead)[0]


def _features_batch(x, XO, track: Track, lookahead) -> np.ndarray:
    """Features of opponent rows ``XO`` against one ego state or one ego state per row."""
    n = XO.shape[0]
    Z = np.empty((n, N_FEATURES))
    Z[:, 0] = _ds(track, XO[:, OS], x[..., S])
    Z[:, 1] = XO[:, OEY] - x[..., EY]
    Z[:, 2] = x[..., EPSI]
    Z[:, 3] = x[..., VX]
    Z[:, 4] = XO[:, OEPSI]
    Z[:, 5] = XO[:, OV]
    for j, d in enumerate(lookahead):
        Z[:, 6 + j] = track.curvature_at(XO[:, OS] + d)
    return Z


# ------------------------------------------------------------ opponent models
class OpponentModel:
    """One-step opponent increments from a GP trained on scaled increments.

    All outputs share the kernel, so one eigendecomposition of the Gram
    matrix gives every output's posterior variance from a single projection.
    """

    def __init__(self, gp: GpModel, delta_scale):
        self.gp = gp
        self.scale = np.asarray(delta_scale, dtype=float)
        lam, V = np.linalg.eigh(gp.kernel.gram(gp.Z, gp.Z))
        self._V = V
        self._inv = 1.0 / (np.maximum(lam, 0.0)[:, None] + np.asarray(gp.noise, float)[None, :])

    def predict(self, Z, chunk: int = 4096):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if len(Z) > chunk:
            parts = [self.predict(Z[i:i + chunk], chunk) for i in range(0, len(Z), chunk)]
            return np.vstack([m for m, _ in parts]), np.vstack([v for _, v in parts])
        ks = self.gp.kernel.gram(self.gp.Z, Z)
        mu = ks.T @ self.gp.weights
        w = self._V.T @ ks
        var = np.maximum(self.gp.kernel.variance - (w * w).T @ self._inv, 0.0)
        return mu * self.scale, var * self.scale ** 2


class ConstantVelocityOpponent:
    """Prediction used before any opponent data exists: keep heading and speed."""

    def __init__(self, T: float):
        self.T = T

    def predict(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        mu = np.zeros((len(Z), 4))
        mu[:, OS] = self.T * Z[:, 5] * np.cos(Z[:, 4])
        mu[:, OEY] = self.T * Z[:, 5] * np.sin(Z[:, 4])
        return mu, np.zeros((len(Z), 4))


def opponent_gp_step(model, feature, xo):
    """Mean next opponent state and per-output variance."""
    mu, var = model.predict(np.atleast_2d(feature))
    return np.asarray(xo, dtype=float) + mu[0], var[0]


def predict_opponent(model, xo, ego_plan, track: Track, N: int, n_samples: int, rng,
                     lookahead=(5.0, 10.0, 15.0)):
    """Sampled open-loop opponent rollout against a fixed ego plan.

    ``ego_plan[k]`` is the ego state used in the step-k feature. Returns the
    per-step sample mean (N, 4) and unbiased sample variance (N, 4) of the
    opponent states at steps 1..N.
    """
    if len(ego_plan) < N:
        raise ConfigError("ego plan shorter than the prediction horizon")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    states = np.tile(np.asarray(xo, dtype=float), (n_samples, 1))
    mean = np.empty((N, 4))
    var = np.zeros((N, 4))
    for k in range(N):
        mu, v = model.predict(_features_batch(np.asarray(ego_plan[k], float), states, track, lookahead))
        states = states + mu + np.sqrt(v) * rng.standard_normal(states.shape)
        mean[k] = states.mean(axis=0)
        if n_samples > 1:
            var[k] = states.var(axis=0, ddof=1)
    return mean, var


# ------------------------------------------------------------ collision ellipses
@dataclass(frozen=True)
class CollisionEllipse:
    s: float
    ey: float
    a: float
    b: float


def covering_axes(length: float, width: float) -> tuple:
    """Semi-axes of the smallest axis-aligned ellipse with the rectangle's aspect that covers it."""
    return length / math.sqrt(2.0), width / math.sqrt(2.0)


def collision_ellipses(mean, var, config: H2hConfig) -> list:
    a0, b0 = covering_axes(config.opp_length, config.opp_width)
    std = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    out = []
    for k in range(len(mean)):
        a = a0 + 0.5 * config.ego_length + config.n_sigma * std[k, OS]
        b = b0 + 0.5 * config.ego_width + config.n_sigma * std[k, OEY]
        out.append(CollisionEllipse(float(mean[k][OS]), float(mean[k][OEY]), a, b))
    return out


def hard_collision(x, xo, config: H2hConfig, track: Track) -> bool:
    """Ego center inside the uninflated collision ellipse around the opponent."""
    a0, b0 = covering_axes(config.opp_length, config.opp_width)
    a, b = a0 + 0.5 * config.ego_length, b0 + 0.5 * config.ego_width
    ds = float(_ds(track, x[S], xo[OS]))
    return (ds / a) ** 2 + ((x[EY] - xo[OEY]) / b) ** 2 < 1.0


# ------------------------------------------------------------ ego MPC
@dataclass
class H2hSolution:
    U: np.ndarray
    X: np.ndarray
    slack: np.ndarray
    status: str
    cost: float = 0.0
    fallback: bool = False

    @property
    def slack_total(self) -> float:
        return float(np.sum(self.slack))


def _ego_braking(x, cfg: H2hConfig):
    """Straight wheels, brake to standstill without reversing."""
    brake = max(cfg.u_min[1], -max(x[VX], 0.0) / cfg.T)
    U = np.tile([0.0, brake], (cfg.N, 1))
    return U[0].copy(), H2hSolution(U, np.tile(x, (cfg.N + 1, 1)), np.zeros(cfg.N), DEGRADED, np.inf, True)


def _ego_nominal(x, U, p: VehicleParams, track: Track, T: float, n_sub: int) -> Nominal:
    starts, kappas, phis, length, closed = track.lookup_arrays()
    packed = p.packed()
    N = len(U)
    X = np.empty((N + 1, 6))
    X[0] = x
    A, B, c = [], [], []
    for k in range(N):
        xn, a, b = K.ACTIVE.integrate_linearized(X[k], U[k], float(T), int(n_sub), packed,
                                                 starts, kappas, phis, float(length), bool(closed))
        X[k + 1] = xn
        A.append(a)
        B.append(b)
        c.append(xn - a @ X[k] - b @ U[k])
    return Nominal(X, np.asarray(U, dtype=float), A, B, c, np.zeros((N, 2)))


def _rate_penalty(N, weights, last_u):
    """Quadratic form of sum_k (u_k - u_{k-1})' diag(weights) (u_k - u_{k-1})."""
    n = 2 * N
    D = np.zeros((n, n))
    d0 = np.zeros(n)
    for k in range(N):
        for j in range(2):
            D[2 * k + j, 2 * k + j] = 1.0
            if k > 0:
                D[2 * k + j, 2 * (k - 1) + j] = -1.0
            else:
                d0[j] = -last_u[j]
    w = np.tile(weights, N)
    return 2.0 * (D.T * w) @ D, 2.0 * (D.T * w) @ d0


def h2h_mpc_step(x, prediction, previous: H2hSolution | None, reference, alpha: float, config: H2hConfig,
                 track: Track, p: VehicleParams, last_u=(0.0, 0.0)):
    """Ego racing MPC with soft collision ellipses and an optional exploration reference.

    ``prediction`` is ``(mean, var)`` of the opponent at steps 1..N and
    ``reference`` an (N, 6) array of ego reference states (ignored when
    ``alpha`` is 0). Returns the first input and the solution.
    """
    cfg = config
    N, T = cfg.N, cfg.T
    x = np.asarray(x, dtype=float)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    mean, var = prediction
    ell = collision_ellipses(mean, var, cfg)
    ea = np.array([e.a for e in ell]) + cfg.clearance
    eb = np.array([e.b for e in ell]) + cfg.clearance
    es = np.array([e.s for e in ell])
    ee = np.array([e.ey for e in ell])
    if previous is None or previous.fallback:
        U0 = np.tile([0.0, 0.0], (N, 1))
    else:
        U0 = np.vstack([previous.U[1:], previous.U[-1:]])
    u_lo = np.tile(cfg.u_min, N)
    u_hi = np.tile(cfg.u_max, N)
    v0 = np.concatenate([np.clip(U0.reshape(-1), u_lo, u_hi), np.zeros(N)])
    Q = np.asarray(cfg.Q, dtype=float)
    ref = None if reference is None or alpha == 0.0 else np.asarray(reference, dtype=float)
    half_w = 0.5 * cfg.ego_width
    Rq = np.tile(cfg.R, N)
    H_rate, g_rate = _rate_penalty(N, np.asarray(cfg.R_d, float), np.asarray(last_u, float))
    n_u = 2 * N
    n = n_u + N
    cache = {}

    def build(v):
        u = v[:n_u]
        nom = _ego_nominal(x, u.reshape(N, 2), p, track, T, cfg.substeps)
        M, psi = condense(nom, x)
        Xbar = nom.X
        H = np.zeros((n, n))
        g = np.zeros(n)
        race = 1.0 - alpha
        # racing terms
        for k in range(1, N + 1):
            a = M[k, EY]
            H[:n_u, :n_u] += 2.0 * race * cfg.q_c * np.outer(a, a)
            g[:n_u] += 2.0 * race * cfg.q_c * psi[k, EY] * a
        H[:n_u, :n_u] += race * (2.0 * np.diag(Rq) + H_rate)
        g[:n_u] += race * g_rate
        # progress -q_s (s_N - s_0)^2, linearized about the nominal; the floor
        # keeps a pull forward when the nominal is at rest
        prog = max(float(_ds(track, Xbar[N, S], x[S])), 0.5 * N * T * cfg.v_max)
        g[:n_u] += -2.0 * race * cfg.q_s * prog * M[N, S]
        # exploration tracking
        if ref is not None:
            for k in range(1, N + 1):
                Mk = M[k]
                e0 = psi[k] - ref[k - 1]
                e0[S] = float(_ds(track, psi[k, S], ref[k - 1, S]))
                MQ = Mk.T * Q
                H[:n_u, :n_u] += 2.0 * alpha * MQ @ Mk
                g[:n_u] += 2.0 * alpha * MQ @ e0
        # slack penalties
        H[n_u:, n_u:] += 2.0 * cfg.w2 * np.eye(N)
        g[n_u:] += cfg.w1
        # constraints: track, speed, ellipses, slack sign, inputs
        w_l, w_r = (np.asarray(a, dtype=float) for a in track.width_at(Xbar[1:, S]))
        rows, lo, hi = [], [], []
        A_ey = np.hstack([M[1:, EY, :], np.zeros((N, N))])
        rows.append(A_ey)
        # bounds widened to the nominal so the current iterate is always feasible
        lo.append(np.minimum(w_r + half_w, Xbar[1:, EY]) - psi[1:, EY])
        hi.append(np.maximum(w_l - half_w, Xbar[1:, EY]) - psi[1:, EY])
        A_vx = np.hstack([M[1:, VX, :], np.zeros((N, N))])
        rows.append(A_vx)
        lo.append(np.minimum(0.0, Xbar[1:, VX]) - psi[1:, VX])
        hi.append(np.maximum(cfg.v_max, Xbar[1:, VX]) - psi[1:, VX])
        dsk = _ds(track, Xbar[1:, S], es)
        dey = Xbar[1:, EY] - ee
        hbar = 1.0 - (dsk / ea) ** 2 - (dey / eb) ** 2
        grad_s = -2.0 * dsk / ea ** 2
        # head-on the lateral gradient vanishes; lean towards the roomier side
        side = np.where(w_l - ee >= ee - w_r, 1.0, -1.0)
        dey_lin = np.where(np.abs(dey) < 0.1 * eb, side * 0.1 * eb, dey)
        grad_e = -2.0 * dey_lin / eb ** 2
        G = grad_s[:, None] * M[1:, S, :] + grad_e[:, None] * M[1:, EY, :]
        A_el = np.hstack([G, -np.eye(N)])
        rows.append(A_el)
        lo.append(np.full(N, -np.inf))
        hi.append(-hbar + G @ u)
        rows.append(np.eye(n))
        lo.append(np.concatenate([u_lo, np.zeros(N)]))
        hi.append(np.concatenate([u_hi, np.full(N, np.inf)]))
        A_in = np.vstack(rows)
        lower = np.concatenate(lo)
        upper = np.concatenate(hi)
        cache["M"], cache["psi"] = M, psi
        # shift into step coordinates around v
        Av = A_in @ v
        return QpProblem(H, g + H @ v, A_in=A_in, lower=lower - Av, upper=upper - Av)

    trust = np.concatenate([np.tile(cfg.trust, N), np.full(N, 1e3)])
    settings = SqpSettings(max_iter=cfg.sqp_iterations, trust_region=trust, qp=cfg.qp)

    def true_cost(U):
        X = _ego_nominal(x, U, p, track, T, cfg.substeps).X
        dsk = _ds(track, X[1:, S], es)
        zeta = np.maximum(1.0 - (dsk / ea) ** 2 - ((X[1:, EY] - ee) / eb) ** 2, 0.0)
        dU = np.diff(np.vstack([last_u, U]), axis=0)
        prog = float(_ds(track, X[N, S], x[S]))
        race = (cfg.q_c * np.sum(X[1:, EY] ** 2) + np.sum(U * U * cfg.R) + np.sum(dU * dU * cfg.R_d)
                - cfg.q_s * prog ** 2)
        c = (1.0 - alpha) * race + float(np.sum(cfg.w1 * zeta + cfg.w2 * zeta ** 2))
        if ref is not None:
            e = X[1:] - ref
            e[:, S] = _ds(track, X[1:, S], ref[:, S])
            c += alpha * float(np.sum(e * e * Q))
        return c, X, zeta

    # a committed manoeuvre can trap the local solve, so a violating solution
    # is compared against one started from full braking
    brake = np.concatenate([np.tile([v0[0], cfg.u_min[1]], N), np.zeros(N)])
    best = None
    for start in (v0, brake):
        res = sqp_solve(build, start, settings)
        if res.status != DEGRADED and res.qp is not None and np.all(np.isfinite(res.x)):
            U = res.x[:n_u].reshape(N, 2)
            c, X, zeta = true_cost(U)
            if best is None or c < best[0]:
                best = (c, U, X, zeta)
        if best is not None and not np.any(best[3] > 0):
            break
    if best is None:
        return _ego_braking(x, cfg)
    c, U, X, zeta = best
    return U[0].copy(), H2hSolution(U, X, zeta, OPTIMAL, c)


# ------------------------------------------------------------ opponent policy
def _kin_step(xo, uo, T, cfg: OpponentConfig, track: Track):
    starts, kappas, _, length, closed = track.lookup_arrays()
    return K.ACTIVE.kinematic_integrate(np.asarray(xo, float), np.asarray(uo, float), float(T),
                                        int(cfg.substeps), float(cfg.wheelbase), starts, kappas,
                                        float(length), bool(closed))


def _kin_linearize(xo, uo, T, cfg: OpponentConfig, track: Track, eps=1e-6):
    f0 = _kin_step(xo, uo, T, cfg, track)
    A = np.empty((4, 4))
    B = np.empty((4, 2))
    for j in range(4):
        d = np.zeros(4)
        d[j] = eps
        A[:, j] = (_kin_step(xo + d, uo, T, cfg, track) - _kin_step(xo - d, uo, T, cfg, track)) / (2 * eps)
    for j in range(2):
        d = np.zeros(2)
        d[j] = eps
        B[:, j] = (_kin_step(xo, uo + d, T, cfg, track) - _kin_step(xo, uo - d, T, cfg, track)) / (2 * eps)
    return f0, A, B


class BlockingOpponent:
    """Kinematic opponent whose MPC races and mirrors the ego's current lateral offset."""

    def __init__(self, config: OpponentConfig = OpponentConfig(), T: float = 0.1, width: float = 0.2):
        self.config = config
        self.T = T
        self.width = width
        self.U = np.zeros((config.N, 2))
        self.last_u = np.zeros(2)

    def reset(self):
        self.U = np.zeros((self.config.N, 2))
        self.last_u = np.zeros(2)

    def step(self, xo, x_ego, track: Track) -> np.ndarray:
        u, self.U, ok = blocking_opponent_step(xo, x_ego, track, self.config, self.T, self.width,
                                               self.U, self.last_u)
        if ok:
            self.U = np.vstack([self.U[1:], self.U[-1:]])
        else:
            self.U = np.zeros((self.config.N, 2))
        self.last_u = u
        return u


def blocking_opponent_step(xo, x_ego, track: Track, config: OpponentConfig = OpponentConfig(),
                           T: float = 0.1, width: float = 0.2, U_nom=None, last_u=(0.0, 0.0)):
    """One opponent MPC solve. Returns (input, planned inputs, solved flag)."""
    cfg = config
    N = cfg.N
    xo = np.asarray(xo, dtype=float)
    U_nom = np.zeros((N, 2)) if U_nom is None else np.asarray(U_nom, dtype=float)
    M = np.zeros((N + 1, 4, 2 * N))
    psi = np.zeros((N + 1, 4))
    psi[0] = xo
    xb = xo.copy()
    for k in range(N):
        f0, A, B = _kin_linearize(xb, U_nom[k], T, cfg, track)
        c = f0 - A @ xb - B @ U_nom[k]
        M[k + 1] = A @ M[k]
        M[k + 1][:, 2 * k:2 * k + 2] += B
        psi[k + 1] = A @ psi[k] + c
        xb = f0
    n = 2 * N
    H = np.zeros((n, n))
    g = np.zeros(n)
    target = float(x_ego[EY])
    for k in range(1, N + 1):
        a = M[k, OEY]
        H += 2.0 * (cfg.q_c + cfg.q_b) * np.outer(a, a)
        g += 2.0 * (cfg.q_c * psi[k, OEY] + cfg.q_b * (psi[k, OEY] - target)) * a
    H += 2.0 * np.diag(np.tile(cfg.R, N))
    H_rate, g_rate = _rate_penalty(N, np.asarray(cfg.R_d, float), np.asarray(last_u, float))
    H += H_rate
    g += g_rate
    sbar = float(_ds(track, psi[N, OS] + M[N, OS] @ U_nom.reshape(-1), xo[OS]))
    g += -2.0 * cfg.q_s * max(sbar, 0.5 * N * T * cfg.v_max) * M[N, OS]
    s_nom = np.array([psi[k, OS] + M[k, OS] @ U_nom.reshape(-1) for k in range(1, N + 1)])
    w_l, w_r = (np.asarray(a, dtype=float) for a in track.width_at(s_nom))
    half_w = 0.5 * width
    A_in = np.vstack([M[1:, OEY, :], M[1:, OV, :], np.eye(n)])
    lower = np.concatenate([np.minimum(w_r + half_w, xo[OEY]) - psi[1:, OEY], -psi[1:, OV],
                            np.tile(cfg.u_min, N)])
    upper = np.concatenate([np.maximum(w_l - half_w, xo[OEY]) - psi[1:, OEY],
                            max(cfg.v_max, xo[OV]) - psi[1:, OV], np.tile(cfg.u_max, N)])
    sol = solve_qp(QpProblem(H, g, A_in=A_in, lower=lower, upper=upper), QpSettings(max_iter=4000))
    if sol.status != OPTIMAL or not np.all(np.isfinite(sol.x)):
        return np.array([0.0, max(cfg.u_min[1], -xo[OV] / T)]), np.zeros((N, 2)), False
    U = sol.x.reshape(N, 2)
    return U[0].copy(), U, True


# ------------------------------------------------------------ exploration
@dataclass
class ExplorationState:
    grid: CandidateGrid
    tracker: StalemateTracker
    target: np.ndarray | None = None
    index: int = -1


def exploration_grid(data: GpDataset, gp: GpModel, config: H2hConfig) -> CandidateGrid:
    """Grid over the controllable feature dimensions, the rest pinned to their medians."""
    grid = build_grid(data.Z, config.exploration, dims=CONTROLLABLE)
    # variances of the scaled increments, equal weight per output
    return precompute_variances(gp, grid, np.ones(gp.n_y))


def exploration_reference(x, xo, mean, state: ExplorationState, alpha: float, config: H2hConfig,
                          track: Track):
    """Ego reference (N, 6) placing the ego at the target offset from the predicted opponent."""
    z = opponent_features(x, xo, track, config.lookahead)
    action = state.tracker.update((z[0], z[1]))
    if action != "hold" or state.target is None:
        state.target, state.index = select_target(z, state.grid, alpha, reversed_=action == "reverse")
    t = state.target
    N = len(mean)
    ref = np.zeros((N, 6))
    ref[:, S] = mean[:, OS] - t[0]
    w_l, w_r = (np.asarray(a, dtype=float) for a in track.width_at(ref[:, S]))
    half = 0.5 * config.ego_width
    ref[:, EY] = np.clip(mean[:, OEY] - t[1], w_r + half, w_l - half)
    ref[:, EPSI] = t[2]
    ref[:, VX] = t[3]
    return ref


# ------------------------------------------------------------ races
LOG_COLUMNS = (["t", "vx", "vy", "r", "epsi", "ey", "s", "opp_s", "opp_ey", "opp_epsi", "opp_v",
                "alpha", "target_index", "slack_total", "separation"])


@dataclass
class RaceLog:
    rows: list
    features: np.ndarray
    deltas: np.ndarray
    opp_states: np.ndarray
    ego_plans: np.ndarray
    overtake_time: float
    border_hits: int
    collisions: int
    min_separation: float
    end_reason: str
    track: Track | None = None

    @property
    def overtaken(self) -> bool:
        return math.isfinite(self.overtake_time)

    def array(self) -> np.ndarray:
        return np.asarray(self.rows, dtype=float).reshape(-1, len(LOG_COLUMNS))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r])

    def to_dict(self) -> dict:
        return {"rows": self.array().tolist(), "features": self.features.tolist(),
                "deltas": self.deltas.tolist(), "opp_states": self.opp_states.tolist(),
                "ego_plans": self.ego_plans.tolist(), "overtake_time": _finite_or_none(self.overtake_time),
                "border_hits": int(self.border_hits), "collisions": int(self.collisions),
                "min_separation": _finite_or_none(self.min_separation), "end_reason": self.end_reason,
                "track": None if self.track is None else self.track.to_dict()}

    @classmethod
    def from_dict(cls, d: dict, horizon: int) -> "RaceLog":
        n = len(d["rows"])
        return cls(np.asarray(d["rows"], dtype=float).reshape(n, len(LOG_COLUMNS)).tolist(),
                   np.asarray(d["features"], dtype=float).reshape(-1, N_FEATURES),
                   np.asarray(d["deltas"], dtype=float).reshape(-1, 4),
                   np.asarray(d["opp_states"], dtype=float).reshape(-1, 4),
                   np.asarray(d["ego_plans"], dtype=float).reshape(-1, horizon + 1, 6),
                   math.inf if d["overtake_time"] is None else float(d["overtake_time"]),
                   int(d["border_hits"]), int(d["collisions"]),
                   math.inf if d["min_separation"] is None else float(d["min_separation"]),
                   d["end_reason"], None if d["track"] is None else Track.from_dict(d["track"]))

    def write_plans_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "k", "vx", "vy", "r", "epsi", "ey", "s"])
            for i, plan in enumerate(self.ego_plans):
                for k, xk in enumerate(plan):
                    w.writerow([i, k] + [repr(float(v)) for v in xk])


def _finite_or_none(v):
    return float(v) if math.isfinite(v) else None


def censored_overtake_times(logs, T: float) -> np.ndarray:
    """Overtaking time per race; races without an overtake count their full duration."""
    return np.array([log.overtake_time if log.overtaken else len(log.rows) * T for log in logs], dtype=float)


class OvertakeDetector:
    """First time the ego lead exceeds ``gap``, linearly interpolated within the step.

    The flag is cleared again only if the lead drops below half the gap.
    """

    def __init__(self, gap: float, T: float):
        self.gap, self.T = gap, T
        self.time = math.inf

    def update(self, t: float, lead_prev: float, lead: float) -> float:
        if math.isinf(self.time):
            if lead > self.gap:
                frac = (self.gap - lead_prev) / (lead - lead_prev) if lead != lead_prev else 1.0
                self.time = t + self.T * min(max(frac, 0.0), 1.0)
        elif lead < 0.5 * self.gap:
            self.time = math.inf
        return self.time


def initial_states(rng: np.random.Generator, config: H2hConfig):
    """Ego behind the opponent near the start of the track."""
    ego = np.array([2.0, 0.0, 0.0, 0.0, rng.uniform(-0.2, 0.2), 0.5])
    opp = np.array([0.5 + rng.uniform(*config.start_gap), rng.uniform(-0.2, 0.2), 0.0, 2.0])
    return ego, opp


def run_race(track: Track, ego0, opp0, model, alpha: float, config: H2hConfig, rng,
             p: VehicleParams | None = None, selector: Selector | None = None,
             exploration: ExplorationState | None = None, duration: float | None = None,
             opponent=None) -> RaceLog:
    """Race the ego against the blocking opponent until shortly after an overtake.

    ``model`` predicts opponent increments (``None`` means constant velocity).
    ``opponent`` replaces the blocking policy with any object whose
    ``step(xo, x_ego, track)`` returns the opponent input.
    Every transition is offered to ``selector``. Ends ``overtake_hold``
    seconds after an overtake, near the track end, or after ``duration``.
    """
    cfg = config
    p = p or VehicleParams.miniature()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = np.asarray(ego0, dtype=float).copy()
    xo = np.asarray(opp0, dtype=float).copy()
    if not _ds(track, x[S], xo[OS]) < 0:
        raise ConfigError("the ego must start behind the opponent")
    model = model or ConstantVelocityOpponent(cfg.T)
    duration = cfg.max_duration if duration is None else duration
    opponent = opponent or BlockingOpponent(cfg.opponent, cfg.T, cfg.opp_width)
    L = track.length
    detector = OvertakeDetector(cfg.overtake_gap, cfg.T)
    rows, feats, deltas, opps, plans = [], [], [], [], []
    previous = None
    last_u = np.zeros(2)
    t = 0.0
    overtake_t = math.inf
    border = collisions = 0
    min_sep = math.inf
    reason = "duration"
    while t < duration - 1e-9:
        if previous is None or previous.fallback:
            ego_plan = np.tile(x, (cfg.N + 1, 1))
        else:
            ego_plan = np.vstack([previous.X[1:], previous.X[-1:]])
            ego_plan[0] = x
        mean, var = predict_opponent(model, xo, ego_plan, track, cfg.N, cfg.n_samples, rng, cfg.lookahead)
        ref = None
        index = -1
        if alpha > 0 and exploration is not None:
            ref = exploration_reference(x, xo, mean, exploration, alpha, cfg, track)
            index = exploration.index
        u, sol = h2h_mpc_step(x, (mean, var), previous, ref, alpha, cfg, track, p, last_u)
        uo = opponent.step(xo, x, track)
        sep = float(math.hypot(float(_ds(track, x[S], xo[OS])), x[EY] - xo[OEY]))
        min_sep = min(min_sep, sep)
        collisions += hard_collision(x, xo, cfg, track)
        rows.append([t, *x, *xo, alpha, index, sol.slack_total, sep])
        plans.append(ego_plan)
        z = opponent_features(x, xo, track, cfg.lookahead)
        try:
            x_next = plant_step(x, u, p, track, cfg.T, cfg.plant)
        except NearSingularFrenet:
            reason = "singular"
            break
        xo_next = _kin_step(xo, uo, cfg.T, cfg.opponent, track)
        feats.append(z)
        deltas.append(xo_next - xo)
        opps.append(xo.copy())
        if selector is not None:
            selector.consider(z, (xo_next - xo) / np.asarray(cfg.delta_scale))
        overtake_t = detector.update(t, float(_ds(track, x[S], xo[OS])), float(_ds(track, x_next[S], xo_next[OS])))
        w_l, w_r = track.width_at(x_next[S])
        if x_next[EY] + 0.5 * cfg.ego_width > w_l + 1e-6 or x_next[EY] - 0.5 * cfg.ego_width < w_r - 1e-6:
            border += 1
        x, xo = x_next, xo_next
        previous = sol
        last_u = u
        t += cfg.T
        if abs(x[EY]) > 3.0 * max(abs(w_l), abs(w_r)):
            reason = "off_track"
            break
        if not track.closed and max(x[S], xo[OS]) > L - cfg.end_margin - max(cfg.lookahead):
            reason = "track_end"
            break
        if t >= overtake_t + cfg.overtake_hold - 1e-9:
            reason = "overtaken"
            break
    opps.append(xo.copy())
    return RaceLog(rows, np.array(feats).reshape(-1, N_FEATURES), np.array(deltas).reshape(-1, 4),
                   np.array(opps).reshape(-1, 4), np.array(plans).reshape(-1, cfg.N + 1, 6),
                   overtake_t, border, collisions, min_sep, reason, track)


# ------------------------------------------------------------ evaluation
def prediction_errors(model, logs, config: H2hConfig, seed: int = 0, ego: str = "realized"):
    """Lateral opponent prediction errors per horizon step over logged races.

    Step 1 uses the direct GP mean; later steps use the sampled rollout run
    for every start index of a log at once. The rollout features use the
    ego's logged future states (``ego="realized"``) or the ego plan that was
    available at the start (``ego="planned"``). Returns a list of error
    arrays, one per step.
    """
    if ego not in ("realized", "planned"):
        raise ConfigError("ego must be 'realized' or 'planned'")
    N, ns = config.N, config.n_samples
    errs = [[] for _ in range(N)]
    for j, log in enumerate(logs):
        rng = np.random.default_rng([seed, j])
        n = len(log.features)
        if n == 0:
            continue
        mu, _ = model.predict(log.features)
        errs[0].extend(np.abs(log.opp_states[:n, OEY] + mu[:, OEY] - log.opp_states[1:n + 1, OEY]))
        starts = np.arange(n - 1)
        if starts.size == 0:
            continue
        ego_states = log.array()[:, 1:7]
        states = np.repeat(log.opp_states[starts], ns, axis=0)
        for k in range(N):
            if ego == "realized":
                xe = ego_states[np.minimum(starts + k, n - 1)]
            else:
                xe = log.ego_plans[starts, k]
            m, v = model.predict(_features_batch(np.repeat(xe, ns, axis=0), states, log.track, config.lookahead))
            states = states + m + np.sqrt(v) * rng.standard_normal(states.shape)
            if k == 0:
                continue
            mean_ey = states[:, OEY].reshape(-1, ns).mean(axis=1)
            ok = starts + k + 1 <= n
            errs[k].extend(np.abs(mean_ey[ok] - log.opp_states[starts[ok] + k + 1, OEY]))
    return [np.asarray(e, dtype=float) for e in errs]


def summarize_errors(errs):
    """(mean, std) per horizon step."""
    return ([float(np.mean(e)) if e.size else math.nan for e in errs],
            [float(np.std(e)) if e.size else math.nan for e in errs])


# ------------------------------------------------------------ protocol
@dataclass(frozen=True)
class H2hProtocol:
    n_initial: int = 20
    n_baseline: int = 100
    explore_alpha: float = 0.9
    explore_duration: float = 600.0
    n_eval: int = 20
    hyper_every: int = 10
    gp_restarts: int = 2
    gp_max_points: int = 250
    track: TrackGenSpec = field(default_factory=TrackGenSpec)

    def __post_init__(self):
        if self.n_initial > self.n_baseline:
            raise ConfigError("the initial races are a prefix of the baseline races")
        if not 0.0 <= self.explore_alpha <= 1.0:
            raise ConfigError("explore_alpha must lie in [0, 1]")


@dataclass
class OpponentLearner:
    """Opponent dataset with its GP, refit after every race."""

    data: GpDataset
    config: H2hConfig
    hyper: HyperFit | None = None
    gp: GpModel | None = None
    races: int = 0

    @classmethod
    def empty(cls, config: H2hConfig) -> "OpponentLearner":
        return cls(GpDataset(N_FEATURES, 4, config.capacity), config)

    def selector(self) -> Selector:
        return Selector(self.data, SelectionPolicy(capacity=self.config.capacity), self.gp)

    def model(self):
        return None if self.gp is None else OpponentModel(self.gp, self.config.delta_scale)

    def refit(self, seed: int, optimize: bool, restarts: int = 2, max_points: int = 250) -> None:
        if len(self.data) < 5:
            return
        if optimize or self.hyper is None:
            self.hyper = optimize_hyperparameters(self.data, MATERN, restarts=restarts, seed=seed, ard=True,
                                                  max_points=max_points, initial=self.hyper)
        self.gp = fit(self.data, self.hyper.kernel, self.hyper.noise)


def _race_on(seed: int, protocol: H2hProtocol, config: H2hConfig, model, alpha, learner=None,
             exploration=None, duration=None, p: VehicleParams | None = None) -> RaceLog:
    track = random_track(seed, protocol.track)
    rng = np.random.default_rng(seed)
    ego, opp = initial_states(rng, config)
    selector = learner.selector() if learner is not None else None
    return run_race(track, ego, opp, model, alpha, config, rng, p=p, selector=selector,
                    exploration=exploration, duration=duration)


def passive_phase(seed: int, protocol: H2hProtocol, config: H2hConfig, p: VehicleParams | None = None):
    """Passive races feeding the initial learner (prefix) and the baseline learner (all)."""
    initial, baseline = OpponentLearner.empty(config), OpponentLearner.empty(config)
    for i in range(protocol.n_baseline):
        race_seed = seed * 100_003 + 1000 + i
        log = _race_on(race_seed, protocol, config, None, 0.0, p=p)
        targets = [baseline] + ([initial] if i < protocol.n_initial else [])
        for lr in targets:
            sel = lr.selector()
            for z, d in zip(log.features, log.deltas):
                sel.consider(z, d / np.asarray(config.delta_scale))
            lr.races += 1
            lr.refit(race_seed, optimize=lr.hyper is None or lr.races % protocol.hyper_every == 0,
                     restarts=protocol.gp_restarts, max_points=protocol.gp_max_points)
    return initial, baseline


def exploration_phase(seed: int, learner: OpponentLearner, protocol: H2hProtocol, config: H2hConfig,
                      p: VehicleParams | None = None):
    """Exploration races on fresh tracks until the session time is used up."""
    logs = []
    elapsed = 0.0
    j = 0
    while elapsed < protocol.explore_duration - 1e-9:
        race_seed = seed * 100_003 + 50_000 + j
        grid = exploration_grid(learner.data, learner.gp, config) if learner.gp is not None else None
        state = None if grid is None else ExplorationState(grid, StalemateTracker(config.exploration))
        log = _race_on(race_seed, protocol, config, learner.model(), protocol.explore_alpha, learner,
                       state, duration=min(config.max_duration, protocol.explore_duration - elapsed), p=p)
        elapsed += len(log.rows) * config.T
        learner.races += 1
        learner.refit(race_seed, optimize=False)
        logs.append(log)
        j += 1
    return logs


def evaluation_phase(seed: int, model, protocol: H2hProtocol, config: H2hConfig, p: VehicleParams | None = None):
    return [_race_on(seed * 100_003 + 90_000 + i, protocol, config, model, 0.0, p=p)
            for i in range(protocol.n_eval)]


@dataclass
class H2hReport:
    explore_logs: list
    eval_explore: list
    eval_baseline: list
    err_explore: list
    err_baseline: list
    explore_size: int
    baseline_size: int
    learners: tuple = ()

    @staticmethod
    def overtake_times(logs):
        return [log.overtake_time for log in logs]

    @property
    def collisions(self) -> int:
        return sum(log.collisions for log in self.eval_explore + self.eval_baseline)


def run_protocol(seed: int, protocol: H2hProtocol = H2hProtocol(), config: H2hConfig = H2hConfig(),
                 p: VehicleParams | None = None) -> H2hReport:
    """Passive data, exploration session, retraining, then paired evaluation races."""
    initial, baseline = passive_phase(seed, protocol, config, p)
    explore_logs = exploration_phase(seed, initial, protocol, config, p)
    initial.refit(seed + 1, optimize=True, restarts=protocol.gp_restarts, max_points=protocol.gp_max_points)
    baseline.refit(seed + 2, optimize=True, restarts=protocol.gp_restarts, max_points=protocol.gp_max_points)
    m_explore, m_base = initial.model(), baseline.model()
    ev_x = evaluation_phase(seed, m_explore, protocol, config, p)
    ev_b = evaluation_phase(seed, m_base, protocol, config, p)
    logs = ev_x + ev_b
    err_x = prediction_errors(m_explore, logs, config, seed)
    err_b = prediction_errors(m_base, logs, config, seed)
    return H2hReport(explore_logs, ev_x, ev_b, err_x, err_b, len(initial.data), len(baseline.data),
                     (initial, baseline))
