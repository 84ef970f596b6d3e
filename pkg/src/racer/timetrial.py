"""Minimum-lap-time stack.

A spatial-domain planner produces a closed raceline, a tracking MPC follows
it on the plant, and two residual GPs (one per layer) are refit after every
lap. During exploration laps the tracking reference is bent towards
uncertain GP features.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse as sp
from scipy.special import erf

from . import _kernels as K
from .dataselect import SelectionPolicy, Selector
from .errors import ConfigError, NearSingularFrenet
from .explore import ExplorationConfig, build_grid, precompute_variances, select_target, update_reference
from .gp import SE, GpDataset, GpModel, fit, optimize_hyperparameters
from .solver import DEGRADED, OPTIMAL, QpProblem, QpSettings, solve_qp
from .track import Track, stadium_track
from .vehicle import EY, EPSI, R, S, VX, VY, PlantConfig, VehicleParams, plant_step

GP_ROWS = (VY, R)
# positions inside the stacked vector [state; input]
STACK_INDEX = {"vx": 0, "vy": 1, "r": 2, "epsi": 3, "ey": 4, "delta": 6, "ax": 7}
FEATURE_MASK = (1, 2, 6)


def feature_mask(names) -> tuple:
    try:
        return tuple(STACK_INDEX[n] for n in names)
    except KeyError as exc:
        raise ConfigError(f"unknown GP feature {exc.args[0]!r}") from None


# ------------------------------------------------------------ configuration
@dataclass(frozen=True)
class TrackingMpcConfig:
    N: int = 20
    T: float = 0.05
    Q: tuple = (10.0, 10.0, 10.0, 5.0, 2.0, 0.0)
    r_delta: float = 50.0
    q_delta_ref: float = 5.0
    r_ax: float = 0.01
    beta: float = 0.6
    u_min: tuple = (-0.35, -8.0)
    u_max: tuple = (0.35, 4.0)
    tightening: str = "erfinv"
    qp: QpSettings = field(default_factory=QpSettings)

    def __post_init__(self):
        if self.N < 2:
            raise ConfigError("horizon must be at least 2")
        if len(self.Q) != 6 or min(self.Q) < 0:
            raise ConfigError("Q must be 6 nonnegative weights")
        if self.r_delta <= 0:
            raise ConfigError("r_delta must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.tightening not in ("erfinv", "erf"):
            raise ConfigError("tightening must be 'erfinv' or 'erf'")


@dataclass(frozen=True)
class PlannerSettings:
    n_points: int = 200
    v_max: float = 20.0
    v_min: float = 5.0
    a_lat: float = 0.75
    a_lat_reference: float = 0.5
    a_accel: float = 3.0
    a_brake: float = 6.0
    substeps: int = 4
    trust: tuple = (1.5, 0.3, 0.2, 0.1, 1.0, 0.03, 2.0)
    r_delta: float = 1.0
    r_ax: float = 1e-3
    prox: float = 1e-4
    initial_iterations: int = 8
    margin: float = 1.0
    qp: QpSettings = field(default_factory=lambda: QpSettings(max_iter=6000, check_every=50))


@dataclass(frozen=True)
class TimeTrialConfig:
    mpc: TrackingMpcConfig = field(default_factory=TrackingMpcConfig)
    planner: PlannerSettings = field(default_factory=PlannerSettings)
    plant: PlantConfig = field(default_factory=PlantConfig)
    exploration: ExplorationConfig = field(default_factory=ExplorationConfig)
    capacity: int = 2000
    process_noise: tuple = (0.0, 0.003, 0.003, 0.0, 0.0, 0.0)
    offtrack_abort: float = 1.0
    max_lap_time: float = 60.0
    gp_restarts: int = 2
    gp_max_points: int = 250
    gp_features: tuple = ("vy", "r", "delta")

    def __post_init__(self):
        feature_mask(self.gp_features)

    @property
    def mask(self) -> tuple:
        return feature_mask(self.gp_features)


# ------------------------------------------------------------ residuals
@dataclass(frozen=True)
class ResidualSample:
    z: np.ndarray
    y_mpc: np.ndarray
    y_plan: np.ndarray


def features(x, u, mask=FEATURE_MASK) -> np.ndarray:
    """GP input picked from [state; input] (default [V_y, r, delta])."""
    return np.concatenate([np.asarray(x, float), np.asarray(u, float)])[list(mask)]


def _stack_plan(X5, U) -> np.ndarray:
    n = len(X5)
    return np.column_stack([X5, np.zeros(n), U])


def _nominal_step(x, u, p: VehicleParams, track: Track, T: float):
    starts, kappas, phis, length, closed = track.lookup_arrays()
    out, status = K.ACTIVE.integrate(np.asarray(x, float), np.asarray(u, float), float(T), 1,
                                     p.packed(), K.LAW_LINEAR, np.zeros(6), starts, kappas, phis,
                                     float(length), bool(closed), 0.0)
    return out


def measure_residuals(x_t, u_t, x_next, p: VehicleParams, track: Track, T: float,
                      mask=FEATURE_MASK) -> ResidualSample:
    """Mismatch between a measured transition and the one-step nominal prediction."""
    pred = _nominal_step(x_t, u_t, p, track, T)
    y = np.asarray(x_next, dtype=float)[list(GP_ROWS)] - pred[list(GP_ROWS)]
    return ResidualSample(features(x_t, u_t, mask), y, y / T)


# ------------------------------------------------------- uncertainty
def propagate_covariance(A_seq, sigma_gp) -> list:
    """Covariance of the predicted states under additive GP noise.

    ``sigma_gp[k]`` is either a full 6x6 matrix or the two variances of the
    (V_y, r) rows. Returns Sigma_1..Sigma_N, starting from Sigma_0 = 0.
    """
    out = []
    cov = np.zeros((6, 6))
    for A, s in zip(A_seq, sigma_gp):
        s = np.asarray(s, dtype=float)
        if s.shape != (6, 6):
            full = np.zeros((6, 6))
            full[GP_ROWS, GP_ROWS] = s
            s = full
        cov = A @ cov @ A.T + s
        cov = 0.5 * (cov + cov.T)
        out.append(cov)
    return out


def erfinv_bisect(y: float, tol: float = 1e-12) -> float:
    if not -1.0 < y < 1.0:
        raise ValueError("erfinv is defined on (-1, 1)")
    lo, hi = -6.0, 6.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if erf(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def tightening(sigma_ey: float, beta: float, variant: str = "erfinv") -> float:
    """Boundary back-off so that a Gaussian e_y stays inside with probability beta."""
    if sigma_ey < 0 or not 0.0 <= beta < 1.0:
        raise ValueError("need sigma >= 0 and 0 <= beta < 1")
    if beta <= 0.5 or sigma_ey == 0.0:
        return 0.0
    if variant == "erf":
        return math.sqrt(2.0) * sigma_ey * float(erf(2.0 * beta - 1.0))
    return math.sqrt(2.0) * sigma_ey * erfinv_bisect(2.0 * beta - 1.0)


# ------------------------------------------------------------- references
@dataclass
class PlannedTrajectory:
    """Closed spatial trajectory; ``X[k]`` = (V_x, V_y, r, e_psi, e_y) at ``s[k]``."""

    s: np.ndarray
    X: np.ndarray
    U: np.ndarray
    lap_time: float
    status: str = OPTIMAL

    @property
    def n_points(self) -> int:
        return len(self.s)

    @property
    def ds(self) -> float:
        return float(self.s[1] - self.s[0])

    def at(self, s_query, length: float):
        """Reference 6-state and steering at arc lengths ``s_query`` (periodic, linear)."""
        sq = np.mod(np.asarray(s_query, dtype=float), length)
        grid = np.append(self.s, length)
        ref = np.empty((sq.size, 6))
        for j in range(5):
            ref[:, j] = np.interp(sq, grid, np.append(self.X[:, j], self.X[0, j]))
        ref[:, S] = sq
        delta = np.interp(sq, grid, np.append(self.U[:, 0], self.U[0, 0]))
        return ref, delta


def _time_per_knot(X, kappa, ds):
    n = 1.0 - kappa * X[:, EY]
    den = X[:, VX] * np.cos(X[:, EPSI]) - X[:, VY] * np.sin(X[:, EPSI])
    return ds * n / den


def speed_profile(track: Track, settings: PlannerSettings, n_points: int | None = None):
    """Curvature-limited speed with forward/backward acceleration passes."""
    n = n_points or settings.n_points
    s = np.arange(n) * track.length / n
    kappa = np.asarray(track.curvature_at(s), dtype=float)
    a_lat = settings.a_lat_reference * _default_mu_g()
    with np.errstate(divide="ignore"):
        v = np.minimum(settings.v_max, np.sqrt(a_lat / np.abs(kappa)))
    ds = track.length / n
    for _ in range(2):
        for k in range(1, 2 * n):
            i, j = k % n, (k - 1) % n
            v[i] = min(v[i], math.sqrt(v[j] ** 2 + 2 * settings.a_accel * ds))
        for k in range(2 * n - 1, 0, -1):
            i, j = (k - 1) % n, k % n
            v[i] = min(v[i], math.sqrt(v[j] ** 2 + 2 * settings.a_brake * ds))
    return s, np.maximum(v, settings.v_min)


_MU_G = None


def _default_mu_g() -> float:
    global _MU_G
    if _MU_G is None:
        p = VehicleParams.default()
        _MU_G = p.mu * p.g
    return _MU_G


def centerline_plan(track: Track, p: VehicleParams, settings: PlannerSettings = PlannerSettings()) -> PlannedTrajectory:
    """Steady-state cornering along the centerline at the reference speed profile."""
    s, v = speed_profile(track, settings)
    kappa = np.asarray(track.curvature_at(s), dtype=float)
    ds = s[1] - s[0]
    L = p.wheelbase
    X = np.zeros((len(s), 5))
    U = np.zeros((len(s), 2))
    for k in range(len(s)):
        vx = v[k]
        r = kappa[k] * vx
        fyr = p.m * r * vx * p.l_f / L
        fyf = p.m * r * vx * p.l_r / L
        vy = p.l_r * r - vx * math.tan(fyr / p.C_ar)
        delta = fyf / p.C_af + math.atan2(vy + p.l_f * r, vx)
        v_next = v[(k + 1) % len(s)]
        accel = (v_next ** 2 - vx ** 2) / (2 * ds)
        ax = accel + (fyf * math.sin(delta) + p.c_r * p.m * p.g + p.C_xw * vx * vx) / p.m - r * vy
        X[k] = (vx, vy, r, -math.atan2(vy, vx), 0.0)
        U[k] = (delta, ax)
    lap = float(np.sum(_time_per_knot(X, kappa, ds)))
    return PlannedTrajectory(s, X, U, lap, "centerline")


# ------------------------------------------------------------- tracking MPC
@dataclass
class MpcSolution:
    U: np.ndarray
    X: np.ndarray
    status: str
    gamma: np.ndarray
    cost: float = 0.0
    fallback: bool = False


@dataclass
class Nominal:
    """Linearization trajectory: states X (N+1), inputs U (N), affine models."""

    X: np.ndarray
    U: np.ndarray
    A: list
    B: list
    c: list
    var: np.ndarray


def nominal_trajectory(x, U_nom, p: VehicleParams, track: Track, T: float, gp: GpModel | None,
                       mask=FEATURE_MASK) -> Nominal:
    """Roll the nominal model plus GP mean along ``U_nom`` from ``x``.

    GP features use the previous plan's inputs and the rolled states of the
    previous step, so one batched prediction suffices.
    """
    N = len(U_nom)
    starts, kappas, phis, length, closed = track.lookup_arrays()
    packed = p.packed()
    X = np.empty((N + 1, 6))
    X[0] = x
    A, B, c = [], [], []
    mu = np.zeros((N, 2))
    var = np.zeros((N, 2))
    if gp is not None:
        feats = np.empty((N, len(mask)))
        xr = np.asarray(x, float).copy()
        for k in range(N):
            feats[k] = features(xr, U_nom[k], mask)
            xr, _ = K.ACTIVE.integrate(xr, U_nom[k], float(T), 1, packed, K.LAW_LINEAR, np.zeros(6),
                                       starts, kappas, phis, float(length), bool(closed), 0.0)
        mu, var = gp.predict(feats)
    for k in range(N):
        xn, a, b = K.ACTIVE.integrate_linearized(X[k], U_nom[k], float(T), 1, packed,
                                                 starts, kappas, phis, float(length), bool(closed))
        xn = xn.copy()
        xn[list(GP_ROWS)] += mu[k]
        X[k + 1] = xn
        A.append(a)
        B.append(b)
        c.append(xn - a @ X[k] - b @ U_nom[k])
    return Nominal(X, np.asarray(U_nom, float), A, B, c, var)


def shift_inputs(previous: MpcSolution | None, fallback_U) -> np.ndarray:
    if previous is None or previous.fallback:
        return np.asarray(fallback_U, dtype=float)
    U = previous.U
    return np.vstack([U[1:], U[-1:]])


def condense(nom: Nominal, x0):
    N = len(nom.A)
    M = np.zeros((N + 1, 6, 2 * N))
    psi = np.zeros((N + 1, 6))
    psi[0] = x0
    for k in range(N):
        M[k + 1] = nom.A[k] @ M[k]
        M[k + 1][:, 2 * k:2 * k + 2] += nom.B[k]
        psi[k + 1] = nom.A[k] @ psi[k] + nom.c[k]
    return M, psi


def _braking(cfg: TrackingMpcConfig, x, gamma):
    N = cfg.N
    U = np.tile([0.0, cfg.u_min[1]], (N, 1))
    return np.array([0.0, cfg.u_min[1]]), MpcSolution(U, np.tile(x, (N + 1, 1)), DEGRADED, gamma, np.inf, True)


def mpc_step(x, reference, gp: GpModel | None, nominal: Nominal, config: TrackingMpcConfig,
             track: Track, last_delta: float = 0.0):
    """One tracking-MPC solve.

    ``reference`` is ``(X_ref, delta_ref)`` with ``X_ref`` of shape (N+1, 6)
    and ``delta_ref`` of length N. Returns the first input and the solution.
    """
    cfg = config
    N = cfg.N
    x = np.asarray(x, dtype=float)
    X_ref, d_ref = reference
    M, psi = condense(nominal, x)
    Q = np.asarray(cfg.Q, dtype=float)

    # chance-constraint back-off on e_y from GP variance propagated along the nominal
    if gp is not None and cfg.beta > 0.5:
        covs = propagate_covariance(nominal.A, nominal.var)
        gamma = np.array([tightening(math.sqrt(max(cv[EY, EY], 0.0)), cfg.beta, cfg.tightening) for cv in covs])
    else:
        gamma = np.zeros(N)

    n = 2 * N
    H = np.zeros((n, n))
    g = np.zeros(n)
    const = 0.0
    for k in range(1, N + 1):
        Mk = M[k]
        e0 = psi[k] - X_ref[k]
        e0[EPSI] = _wrap(e0[EPSI])
        MQ = Mk.T * Q
        H += 2.0 * MQ @ Mk
        g += 2.0 * MQ @ e0
        const += float(e0 @ (Q * e0))
    di = np.arange(0, n, 2)
    ai = np.arange(1, n, 2)
    # steering-rate chain, anchored at the last applied steering angle
    D = np.zeros((N, n))
    D[np.arange(N), di] = 1.0
    D[np.arange(1, N), di[:-1]] = -1.0
    dconst = np.zeros(N)
    dconst[0] = -last_delta
    H += 2.0 * cfg.r_delta * D.T @ D
    g += 2.0 * cfg.r_delta * D.T @ dconst
    H[di, di] += 2.0 * cfg.q_delta_ref
    g[di] -= 2.0 * cfg.q_delta_ref * np.asarray(d_ref, dtype=float)
    H[ai, ai] += 2.0 * cfg.r_ax

    w_l = np.asarray(track.width_at(np.mod(nominal.X[1:, S], track.length))[0], dtype=float)
    w_r = np.asarray(track.width_at(np.mod(nominal.X[1:, S], track.length))[1], dtype=float)
    A_ey = M[1:, EY, :]
    lo = w_r + gamma - psi[1:, EY]
    hi = w_l - gamma - psi[1:, EY]
    A_in = np.vstack([A_ey, np.eye(n)])
    lower = np.concatenate([lo, np.tile(cfg.u_min, N)])
    upper = np.concatenate([hi, np.tile(cfg.u_max, N)])
    prob = QpProblem(H, g, A_in=A_in, lower=lower, upper=upper)
    x0 = np.clip(nominal.U.reshape(-1), lower[N:], upper[N:])
    sol = solve_qp(prob, cfg.qp, x0=x0)
    if sol.status != OPTIMAL or not np.all(np.isfinite(sol.x)):
        return _braking(cfg, x, gamma)
    U = sol.x.reshape(N, 2)
    Xp = np.einsum("kij,j->ki", M, sol.x) + psi
    return U[0].copy(), MpcSolution(U, Xp, OPTIMAL, gamma, sol.objective + const)


def _wrap(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


# ------------------------------------------------------------- planner
def _spatial_step(x5, u, s0, ds, n_sub, packed, starts, kappas, phis, length, closed, mu):
    """Substepped spatial Euler step of the 5 non-s states and its Jacobians."""
    h = ds / n_sub
    xc = np.append(np.asarray(x5, float), s0)
    G = np.eye(5)
    Hm = np.zeros((5, 2))
    for j in range(n_sub):
        sw = K._wrap_s(s0 + j * h, length, closed)
        i = K._piece_index(starts, sw)
        kappa = kappas[i]
        f = K.ACTIVE.bicycle_rhs(xc, u, kappa, phis[i], packed, K.LAW_LINEAR).copy()
        f[1] += mu[0]
        f[2] += mu[1]
        jx, ju = K.ACTIVE.bicycle_jacobian(xc, u, kappa, packed)
        sdot = f[5]
        grad_s = jx[5, :5]
        F = f[:5] / sdot
        DF = (jx[:5, :5] * sdot - np.outer(f[:5], grad_s)) / (sdot * sdot)
        DU = ju[:5] / sdot
        G = (np.eye(5) + h * DF) @ G
        Hm = (np.eye(5) + h * DF) @ Hm + h * DU
        xc[:5] = xc[:5] + h * F
        xc[5] += h
    return xc[:5], G, Hm


def _plan_qp(track: Track, p: VehicleParams, warm: PlannedTrajectory, mu, settings: PlannerSettings,
             trust_states: bool):
    n = warm.n_points
    ds = warm.ds
    starts, kappas, phis, length, closed = track.lookup_arrays()
    packed = p.packed()
    nx, nu = 5 * n, 2 * n
    nv = nx + nu
    X, U = warm.X, warm.U

    def xi(k, j):
        return 5 * (k % n) + j

    def ui(k, j):
        return nx + 2 * (k % n) + j

    rows, cols, vals = [], [], []
    b_eq = np.zeros(nx)
    for k in range(n):
        xn, G, Hm = _spatial_step(X[k], U[k], warm.s[k], ds, settings.substeps, packed,
                                  starts, kappas, phis, float(length), bool(closed), mu[k])
        for a in range(5):
            r = 5 * k + a
            rows.append(r)
            cols.append(xi(k + 1, a))
            vals.append(1.0)
            for b in range(5):
                if G[a, b] != 0.0:
                    rows.append(r)
                    cols.append(xi(k, b))
                    vals.append(-G[a, b])
            for b in range(2):
                if Hm[a, b] != 0.0:
                    rows.append(r)
                    cols.append(ui(k, b))
                    vals.append(-Hm[a, b])
            b_eq[r] = xn[a] - X[(k + 1) % n, a]
    A_eq = sp.csc_matrix((vals, (rows, cols)), shape=(nx, nv))

    # cost: lap time, linearized, plus positive curvature on V_x and a proximal term
    kappa = np.asarray(track.curvature_at(warm.s), dtype=float)
    nrm = 1.0 - kappa * X[:, EY]
    ce, se = np.cos(X[:, EPSI]), np.sin(X[:, EPSI])
    den = X[:, VX] * ce - X[:, VY] * se
    g = np.zeros(nv)
    hdiag = np.zeros(nv)
    idx = 5 * np.arange(n)
    g[idx + VX] = -ds * nrm * ce / den ** 2
    g[idx + VY] = ds * nrm * se / den ** 2
    g[idx + EPSI] = ds * nrm * (X[:, VX] * se + X[:, VY] * ce) / den ** 2
    g[idx + EY] = -ds * kappa / den
    hdiag[idx + VX] = 2.0 * ds * nrm * ce ** 2 / den ** 3
    trust = np.asarray(settings.trust, dtype=float)
    scale = np.concatenate([np.tile(trust[:5], n), np.tile(trust[5:], n)])
    hdiag += settings.prox / scale ** 2
    P = sp.diags(hdiag)
    # smoothness of the inputs around the loop
    Dd = sp.csc_matrix((np.concatenate([np.ones(n), -np.ones(n)]),
                        (np.concatenate([np.arange(n), np.arange(n)]),
                         np.concatenate([[ui(k + 1, 0) for k in range(n)], [ui(k, 0) for k in range(n)]]))),
                       shape=(n, nv))
    Da = sp.csc_matrix((np.concatenate([np.ones(n), -np.ones(n)]),
                        (np.concatenate([np.arange(n), np.arange(n)]),
                         np.concatenate([[ui(k + 1, 1) for k in range(n)], [ui(k, 1) for k in range(n)]]))),
                       shape=(n, nv))
    smooth = 2.0 * settings.r_delta * (Dd.T @ Dd) + 2.0 * settings.r_ax * (Da.T @ Da)
    w0 = np.concatenate([X.reshape(-1), U.reshape(-1)])
    P = (P + smooth).tocsc()
    g = g + smooth @ w0

    # boxes: physical bounds intersected with the trust region, in step coordinates
    cfg_umin = (-0.35, -p.mu * p.g)
    cfg_umax = (0.35, 4.0)
    lo = np.full(nv, -np.inf)
    hi = np.full(nv, np.inf)
    w_l, w_r = (np.asarray(a, dtype=float) for a in track.width_at(warm.s))
    lo[idx + EY] = w_r + settings.margin - X[:, EY]
    hi[idx + EY] = w_l - settings.margin - X[:, EY]
    lo[idx + VX] = settings.v_min - X[:, VX]
    hi[idx + VX] = settings.v_max - X[:, VX]
    ui0 = nx + 2 * np.arange(n)
    lo[ui0] = cfg_umin[0] - U[:, 0]
    hi[ui0] = cfg_umax[0] - U[:, 0]
    lo[ui0 + 1] = cfg_umin[1] - U[:, 1]
    hi[ui0 + 1] = cfg_umax[1] - U[:, 1]
    limited = np.zeros(nv, dtype=bool)
    limited[nx:] = True
    limited[idx + VX] = True
    if trust_states:
        limited[:nx] = True
    lo = np.where(limited, np.maximum(lo, -scale), lo)
    hi = np.where(limited, np.minimum(hi, scale), hi)

    # lateral acceleration V_x * r, linearized
    a_max = settings.a_lat * p.mu * p.g
    La = sp.csc_matrix((np.concatenate([X[:, R], X[:, VX]]),
                        (np.concatenate([np.arange(n), np.arange(n)]),
                         np.concatenate([idx + VX, idx + R]))), shape=(n, nv))
    lat = X[:, VX] * X[:, R]
    A_in = sp.vstack([sp.eye(nv, format="csc"), La]).tocsc()
    lower = np.concatenate([lo, -a_max - lat])
    upper = np.concatenate([hi, a_max - lat])
    return QpProblem(P, g, A_eq, b_eq, A_in, lower, upper), w0


def plan_min_time(track: Track, gp_plan: GpModel | None, warm: PlannedTrajectory, p: VehicleParams,
                  settings: PlannerSettings = PlannerSettings(), iterations: int = 1,
                  mask=FEATURE_MASK) -> PlannedTrajectory:
    """Full-step SQP iterations on the closed spatial lap-time problem.

    GP corrections are evaluated once at the warm start's features and held
    fixed. On solver failure the last accepted trajectory is returned with a
    degraded status.
    """
    if warm.n_points < 3:
        raise ConfigError("need at least 3 planning points")
    n = warm.n_points
    kappa = np.asarray(track.curvature_at(warm.s), dtype=float)
    if gp_plan is not None:
        mu, _ = gp_plan.predict(_stack_plan(warm.X, warm.U)[:, list(mask)])
    else:
        mu = np.zeros((n, 2))
    current = warm
    status = OPTIMAL
    for it in range(iterations):
        prob, w0 = _plan_qp(track, p, current, mu, settings, trust_states=it > 0 or warm.status != "centerline")
        sol = solve_qp(prob, settings.qp)
        if sol.status != OPTIMAL:
            status = DEGRADED
            break
        w = w0 + sol.x
        X = w[:5 * n].reshape(n, 5)
        U = w[5 * n:].reshape(n, 2)
        lap = float(np.sum(_time_per_knot(X, kappa, current.ds)))
        if not np.isfinite(lap) or lap <= 0:
            status = DEGRADED
            break
        current = PlannedTrajectory(warm.s.copy(), X, U, lap, OPTIMAL)
    if current is warm:
        return PlannedTrajectory(warm.s.copy(), warm.X.copy(), warm.U.copy(), warm.lap_time, DEGRADED)
    current.status = status
    return current


# ------------------------------------------------------------- GP state
@dataclass
class LearningState:
    track_data: GpDataset
    plan_data: GpDataset
    track_gp: GpModel | None = None
    plan_gp: GpModel | None = None
    plan: PlannedTrajectory | None = None

    @classmethod
    def empty(cls, capacity: int = 2000, n_z: int = 3) -> "LearningState":
        return cls(GpDataset(n_z, 2, capacity), GpDataset(n_z, 2, capacity))


def refit(state: LearningState, config: TimeTrialConfig, seed: int) -> None:
    """Re-optimize hyperparameters and refit both GPs on their datasets."""
    for name in ("track", "plan"):
        data = getattr(state, f"{name}_data")
        if len(data) < 5:
            continue
        hf = optimize_hyperparameters(data, SE, restarts=config.gp_restarts, seed=seed,
                                      max_points=config.gp_max_points)
        setattr(state, f"{name}_gp", fit(data, hf.kernel, hf.noise))


# ------------------------------------------------------------- lap loop
LOG_COLUMNS = (["t"] + ["vx", "vy", "r", "epsi", "ey", "s"] + ["delta", "ax"]
               + ["zref_vy", "zref_r", "zref_delta", "gamma1", "status"])


@dataclass
class IterationLog:
    iteration: int
    alpha: float
    rows: list
    lap_time_planned: float
    lap_time_measured: float
    track_size: int
    plan_size: int
    aborted: bool = False
    fallbacks: int = 0

    def array(self) -> np.ndarray:
        return np.array([r[:-1] for r in self.rows], dtype=float).reshape(-1, len(LOG_COLUMNS) - 1)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r[:-1]] + [r[-1]])
            w.writerow(["lap_time_planned", "lap_time_measured", "track_size", "plan_size"])
            w.writerow([repr(self.lap_time_planned), repr(self.lap_time_measured),
                        self.track_size, self.plan_size])


def _exploration_grid(state: LearningState, config: TimeTrialConfig):
    if state.track_gp is None or len(state.track_data) < 2:
        return None
    grid = build_grid(state.track_data.Z, config.exploration)
    # variance weights follow the tracking cost of the residual rows
    S = np.asarray(config.mpc.Q, dtype=float)[list(GP_ROWS)]
    return precompute_variances(state.track_gp, grid, S)


def run_lap(track: Track, p: VehicleParams, plan: PlannedTrajectory, gp: GpModel | None, alpha: float,
            config: TimeTrialConfig, rng: np.random.Generator, selectors=(), grid=None,
            reference_fn=None, iteration: int = 0) -> IterationLog:
    """Drive one flying lap on the plant while feeding the residual selectors.

    ``reference_fn(s_nominal) -> (X_ref, delta_ref)`` overrides the reference
    taken from ``plan`` (used for validation laps).
    """
    cfg = config.mpc
    N, T = cfg.N, cfg.T
    L = track.length
    ref_at = reference_fn or (lambda s: plan.at(s, L))
    x0_ref, d0 = ref_at(np.array([0.0]))
    x = x0_ref[0].copy()
    x[S] = 0.0
    noise = np.asarray(config.process_noise, dtype=float)
    mask = config.mask
    U_nom = np.tile([float(d0[0]), 0.0], (N, 1))
    previous = None
    last_delta = float(d0[0])
    rows = []
    t = 0.0
    s_unwrapped = 0.0
    lap_time = math.inf
    aborted = False
    fallbacks = 0
    w_l, w_r = (float(a) for a in track.width_at(0.0))
    while t < config.max_lap_time:
        U_nom = shift_inputs(previous, U_nom)
        try:
            nom = nominal_trajectory(x, U_nom, p, track, T, gp, mask)
        except NearSingularFrenet:
            aborted = True
            break
        s_nom = np.mod(s_unwrapped + np.concatenate([[0.0], np.cumsum(np.diff(nom.X[:, S]) % L)]), L)
        X_ref, d_ref = ref_at(s_nom)
        d_ref = d_ref[:N]
        z_ref = np.full(3, np.nan)
        if alpha > 0.0 and grid is not None:
            for k in range(N):
                stacked = np.concatenate([X_ref[k + 1], [d_ref[k], 0.0]])
                target, _ = select_target(stacked[list(mask)], grid, alpha)
                stacked = update_reference(stacked, target, mask)
                X_ref[k + 1] = stacked[:6]
                d_ref[k] = stacked[6]
                if k == 0:
                    z_ref = stacked[list(FEATURE_MASK)]
        u, sol = mpc_step(x, (X_ref, d_ref), gp, nom, cfg, track, last_delta)
        fallbacks += sol.fallback
        try:
            x_next = plant_step(x, u, p, track, T, config.plant)
        except NearSingularFrenet:
            aborted = True
            break
        x_next = x_next + noise * rng.standard_normal(6)
        rows.append([t, *x, *u, *z_ref, float(sol.gamma[0]) if len(sol.gamma) else 0.0, sol.status])
        sample = measure_residuals(x, u, x_next, p, track, T, mask)
        for sel, which in selectors:
            sel.consider(sample.z, sample.y_mpc if which == "track" else sample.y_plan)
        ds = (x_next[S] - x[S]) % L
        if s_unwrapped + ds >= L:
            lap_time = t + T * (L - s_unwrapped) / ds
            x = x_next
            break
        s_unwrapped += ds
        x = x_next
        previous = sol
        last_delta = float(u[0])
        t += T
        if x[EY] > w_l + config.offtrack_abort or x[EY] < w_r - config.offtrack_abort:
            aborted = True
            break
    if aborted:
        lap_time = math.inf
    return IterationLog(iteration, alpha, rows, plan.lap_time if plan else math.nan, lap_time,
                        0, 0, aborted, fallbacks)


def _selectors(state: LearningState, config: TimeTrialConfig):
    policy = SelectionPolicy(capacity=config.capacity)
    return [(Selector(state.track_data, policy, state.track_gp), "track"),
            (Selector(state.plan_data, policy, state.plan_gp), "plan")]


def warmup(track: Track, p: VehicleParams, config: TimeTrialConfig, seed: int) -> tuple:
    """GP-free centerline lap that seeds both datasets; returns (state, log)."""
    state = LearningState.empty(config.capacity, len(config.gp_features))
    plan = centerline_plan(track, p, config.planner)
    rng = np.random.default_rng([seed, 0])
    log = run_lap(track, p, plan, None, 0.0, config, rng, _selectors(state, config), iteration=-1)
    log.track_size, log.plan_size = len(state.track_data), len(state.plan_data)
    refit(state, config, seed)
    state.plan = plan_min_time(track, state.plan_gp, plan, p, config.planner,
                               iterations=config.planner.initial_iterations, mask=config.mask)
    return state, log


def run_iteration(j: int, alpha: float, state: LearningState, track: Track, p: VehicleParams,
                  config: TimeTrialConfig, seed: int) -> IterationLog:
    """One learning iteration: exploration-aware lap, then GP refits and a planner update."""
    rng = np.random.default_rng([seed, j + 1])
    grid = _exploration_grid(state, config) if alpha > 0 else None
    log = run_lap(track, p, state.plan, state.track_gp, alpha, config, rng,
                  _selectors(state, config), grid, iteration=j)
    log.track_size, log.plan_size = len(state.track_data), len(state.plan_data)
    refit(state, config, seed + 1000 * (j + 1))
    state.plan = plan_min_time(track, state.plan_gp, state.plan, p, config.planner, mask=config.mask)
    return log


def run_schedule(alphas, seed: int, config: TimeTrialConfig = TimeTrialConfig(),
                 track: Track | None = None, p: VehicleParams | None = None):
    """Warm-up lap followed by one iteration per alpha. Returns (state, logs)."""
    track = track or stadium_track()
    p = p or VehicleParams.default()
    state, wlog = warmup(track, p, config, seed)
    logs = [wlog]
    for j, a in enumerate(alphas):
        logs.append(run_iteration(j, float(a), state, track, p, config, seed))
    return state, logs


# ------------------------------------------------------------- validation
def weaving_reference(track: Track, p: VehicleParams, settings: PlannerSettings, seed: int = 12345,
                      amplitude: float = 1.5, speed_spread: float = 0.05, base: str = "raceline"):
    """Reference that weaves across a fixed nominal raceline at varying speed.

    Used to record held-out residuals in the same speed regime as racing laps.
    The raceline comes from GP-free planning, so it is identical for every run.
    """
    plan = centerline_plan(track, p, settings)
    if base == "raceline":
        plan = plan_min_time(track, None, plan, p, settings, iterations=settings.initial_iterations)
    rng = np.random.default_rng(seed)
    L = track.length
    waves = [(rng.uniform(20.0, 45.0), rng.uniform(0, 2 * math.pi), rng.uniform(0.5, 1.0)) for _ in range(3)]
    speed_wave = (rng.uniform(40.0, 80.0), rng.uniform(0, 2 * math.pi))

    def ref(s_query):
        X, d = plan.at(s_query, L)
        s = np.asarray(s_query, dtype=float)
        w_l, w_r = (np.asarray(a, dtype=float) for a in track.width_at(np.mod(s, L)))
        ey = sum(a * amplitude / 2.0 * np.sin(2 * math.pi * s / lam + ph) for lam, ph, a in waves)
        X[:, EY] = np.clip(X[:, EY] + ey, w_r + settings.margin, w_l - settings.margin)
        X[:, VX] *= 1.0 + speed_spread * np.sin(2 * math.pi * s / speed_wave[0] + speed_wave[1])
        return X, d

    return plan, ref


def validation_samples(track: Track, p: VehicleParams, config: TimeTrialConfig, seed: int = 12345, **weave):
    """(Z, Y_mpc, Y_plan) recorded on a GP-free weaving lap with a fixed seed."""
    base, ref = weaving_reference(track, p, config.planner, seed, **weave)
    data = GpDataset(len(config.gp_features), 2, capacity=100000)
    collect = _Collector(data)
    rng = np.random.default_rng(seed)
    run_lap(track, p, base, None, 0.0, config, rng, [(collect, "track")], reference_fn=ref)
    Z, Y = data.Z, data.Y
    return Z, Y, Y / config.mpc.T


class _Collector:
    def __init__(self, data: GpDataset):
        self.data = data

    def consider(self, z, y):
        self.data.add(z, y)


def residual_rmse(model: GpModel, Z, Y) -> np.ndarray:
    """Per-output RMSE of the GP mean against recorded residuals."""
    mu, _ = model.predict(np.asarray(Z, dtype=float))
    return np.sqrt(np.mean((mu - np.asarray(Y, dtype=float)) ** 2, axis=0))
