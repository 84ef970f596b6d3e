"""Convex QP solver and a trust-region SQP driver.

The QP solver runs ADMM iterations in the style of OSQP (equilibrated data,
adaptive step size, infeasibility certificate) and then polishes the result
by solving the KKT system of the identified active set, which brings
residuals down to roundoff when the active set is right.

Problems are ``min 0.5 x'Hx + g'x`` subject to ``A_eq x = b_eq`` and
``lower <= A_in x <= upper``. Dual convention: ``y > 0`` on an active upper
bound, ``y < 0`` on an active lower bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import _kernels as K

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"
DEGRADED = "degraded"

_INF = 1e20


@dataclass
class QpProblem:
    H: object
    g: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray = None
    A_in: object = None
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.g.size
        if sp.issparse(self.H):
            self.H = sp.csc_matrix(0.5 * (self.H + self.H.T))
        else:
            H = np.asarray(self.H, dtype=float).reshape(n, n)
            self.H = 0.5 * (H + H.T)
        if self.A_eq is None:
            self.A_eq, self.b_eq = np.zeros((0, n)), np.zeros(0)
        elif not sp.issparse(self.A_eq):
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
        if self.A_in is None:
            self.A_in = np.zeros((0, n))
            self.lower, self.upper = np.zeros(0), np.zeros(0)
        elif not sp.issparse(self.A_in):
            self.A_in = np.atleast_2d(np.asarray(self.A_in, dtype=float))
        m_in = self.A_in.shape[0]
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        self.lower = np.full(m_in, -np.inf) if self.lower is None else np.asarray(self.lower, float).ravel()
        self.upper = np.full(m_in, np.inf) if self.upper is None else np.asarray(self.upper, float).ravel()
        if (self.A_eq.shape[1] != n or self.A_in.shape[1] != n or self.b_eq.size != self.A_eq.shape[0]
                or self.lower.size != m_in or self.upper.size != m_in):
            raise ValueError("inconsistent QP dimensions")

    @property
    def n(self) -> int:
        return self.g.size

    @property
    def sparse(self) -> bool:
        return sp.issparse(self.H) or sp.issparse(self.A_eq) or sp.issparse(self.A_in)

    def stacked(self):
        """All constraints as ``l <= A x <= u`` (equalities first)."""
        if self.sparse:
            A = sp.vstack([sp.csr_matrix(self.A_eq), sp.csr_matrix(self.A_in)]).tocsc()
        else:
            A = np.vstack([np.asarray(self.A_eq, float), np.asarray(self.A_in, float)])
        l = np.concatenate([self.b_eq, self.lower])
        u = np.concatenate([self.b_eq, self.upper])
        return A, l, u

    def objective(self, x) -> float:
        return float(0.5 * x @ (self.H @ x) + self.g @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int
    objective: float
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@dataclass(frozen=True)
class QpSettings:
    tol: float = 1e-6
    max_iter: int = 20000
    regularization: float = 1e-9
    sigma: float = 1e-6
    relax: float = 1.6
    rho: float = 0.1
    check_every: int = 25
    scaling_iters: int = 10
    polish: bool = True
    dense_limit: int = 150


# ----------------------------------------------------------------- helpers
def _mat(M, dense):
    if dense:
        return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
    return sp.csc_matrix(M)


def _colnorm_inf(M, dense):
    if dense:
        return np.max(np.abs(M), axis=0) if M.shape[0] else np.zeros(M.shape[1])
    return np.asarray(abs(M).max(axis=0).todense()).ravel() if M.shape[0] else np.zeros(M.shape[1])


def _rownorm_inf(M, dense):
    if dense:
        return np.max(np.abs(M), axis=1) if M.shape[1] else np.zeros(M.shape[0])
    return np.asarray(abs(M).max(axis=1).todense()).ravel()


def _ruiz(P, A, iters, dense):
    n, m = P.shape[0], A.shape[0]
    D, E = np.ones(n), np.ones(m)
    for _ in range(iters):
        cn = np.maximum(_colnorm_inf(P, dense), _colnorm_inf(A, dense))
        rn = _rownorm_inf(A, dense) if m else np.zeros(0)
        dd = 1.0 / np.sqrt(np.clip(cn, 1e-4, 1e4))
        ee = 1.0 / np.sqrt(np.clip(rn, 1e-4, 1e4))
        if dense:
            P = dd[:, None] * P * dd[None, :]
            A = ee[:, None] * A * dd[None, :]
        else:
            Dm, Em = sp.diags(dd), sp.diags(ee)
            P = (Dm @ P @ Dm).tocsc()
            A = (Em @ A @ Dm).tocsc()
        D *= dd
        E *= ee
    return P, A, D, E


def _residuals(P, A, q, l, u, x, y):
    Ax = A @ x
    rp = float(np.max(np.maximum(l - Ax, 0.0) + np.maximum(Ax - u, 0.0))) if Ax.size else 0.0
    rd = float(np.max(np.abs(P @ x + q + A.T @ y))) if x.size else 0.0
    return rp, rd


# ----------------------------------------------------------------- polishing
def _kkt_solve(P, A_act, rhs_x, rhs_y, delta, dense):
    n, k = P.shape[0], A_act.shape[0]
    if dense:
        M = np.block([[P + delta * np.eye(n), A_act.T], [A_act, -delta * np.eye(k)]])
        exact = np.block([[P, A_act.T], [A_act, np.zeros((k, k))]])
        solve = lambda r: np.linalg.solve(M, r)
    else:
        M = sp.bmat([[P + delta * sp.eye(n), A_act.T], [A_act, -delta * sp.eye(k)]], format="csc")
        exact = sp.bmat([[P, A_act.T], [A_act, None]], format="csc") if k else P
        lu = splu(M)
        solve = lu.solve
    rhs = np.concatenate([rhs_x, rhs_y])
    sol = solve(rhs)
    for _ in range(5):
        sol = sol + solve(rhs - exact @ sol)
    return sol[:n], sol[n:]


def _polish(P, A, q, l, u, x, z, y, tol, dense, max_rounds=10):
    m = A.shape[0]
    eq = np.isclose(l, u)
    lower = eq | (z - l < -y)
    upper = ~eq & (u - z < y)
    for _ in range(max_rounds):
        act = lower | upper
        idx = np.flatnonzero(act)
        A_act = A[idx] if dense else A[idx, :]
        target = np.where(upper[idx], u[idx], l[idx])
        xp, ya = _kkt_solve(P, A_act, -q, target, 1e-10, dense)
        yp = np.zeros(m)
        yp[idx] = ya
        Ax = A @ xp
        viol_lo = ~act & (Ax < l - tol)
        viol_up = ~act & (Ax > u + tol)
        wrong = act & ~eq & ((lower & (yp > tol)) | (upper & (yp < -tol)))
        if not (viol_lo.any() or viol_up.any() or wrong.any()):
            return xp, yp, True
        lower = (lower & ~wrong) | viol_lo
        upper = (upper & ~wrong) | viol_up
    return x, y, False


# ----------------------------------------------------------------- solve_qp
def solve_qp(problem: QpProblem, settings: QpSettings = QpSettings(), x0=None, y0=None) -> QpSolution:
    """Solve a convex QP. Deterministic; never raises on infeasibility."""
    s = settings
    n = problem.n
    A_raw, l_raw, u_raw = problem.stacked()
    dense = not problem.sparse or n <= s.dense_limit
    P0 = _mat(problem.H, dense)
    A0 = _mat(A_raw, dense)
    m = A0.shape[0]
    reg = s.regularization * (np.eye(n) if dense else sp.eye(n, format="csc"))
    P0 = P0 + reg
    q0 = problem.g
    if m == 0:
        x = np.linalg.solve(P0, -q0) if dense else splu(P0.tocsc()).solve(-q0)
        rp, rd = _residuals(P0, A0, q0, l_raw, u_raw, x, np.zeros(0))
        return QpSolution(x, np.zeros(0), OPTIMAL if rd <= s.tol else MAX_ITER, rp, rd, 0,
                          problem.objective(x), True)

    P, A, D, E = _ruiz(P0, A0, s.scaling_iters, dense)
    q = D * q0
    l = np.where(np.isfinite(l_raw), E * np.clip(l_raw, -_INF, _INF), -np.inf)
    u = np.where(np.isfinite(u_raw), E * np.clip(u_raw, -_INF, _INF), np.inf)
    eq = np.isclose(l_raw, u_raw)
    loose = ~np.isfinite(l_raw) & ~np.isfinite(u_raw)

    def rho_vec(r):
        v = np.full(m, r)
        v[eq] = 1e3 * r
        v[loose] = 1e-6
        return v

    def factor(rv):
        if dense:
            M = P + s.sigma * np.eye(n) + (A.T * rv) @ A
            return np.linalg.inv(M)
        M = (P + s.sigma * sp.eye(n) + A.T @ sp.diags(rv) @ A).tocsc()
        return splu(M)

    x = np.zeros(n) if x0 is None else np.asarray(x0, float) / D
    z = A @ x if m else np.zeros(0)
    z = np.clip(z, l, u)
    y = np.zeros(m) if y0 is None else np.asarray(y0, float) / E
    rho = s.rho
    rv = rho_vec(rho)
    fac = factor(rv)
    Pd = P if dense else None
    Ad = A if dense else None
    it = 0
    status = MAX_ITER
    rp = rd = np.inf
    tried = None
    while it < s.max_iter:
        y_prev = y.copy()
        chunk = min(s.check_every, s.max_iter - it)
        if dense:
            x, z, y, k, _, _ = K.ACTIVE.admm(fac, Pd, q, Ad, l, u, rv, s.sigma, s.relax,
                                             x, z, y, chunk, chunk, 0.0)
        else:
            for k in range(1, chunk + 1):
                xt = fac.solve(s.sigma * x - q + A.T @ (rv * z - y))
                zt = A @ xt
                x = s.relax * xt + (1 - s.relax) * x
                zr = s.relax * zt + (1 - s.relax) * z
                zn = np.minimum(np.maximum(zr + y / rv, l), u)
                y = y + rv * (zr - zn)
                z = zn
        it += k
        xu, yu = D * x, E * y
        rp, rd = _residuals(P0, A0, q0, l_raw, u_raw, xu, yu)
        if rp <= s.tol and rd <= s.tol:
            status = OPTIMAL
            break
        if s.polish:
            zu = z / E
            key = (((zu - l_raw) < -yu) | ((u_raw - zu) < yu)).tobytes()
            if key != tried:
                tried = key
                xp, yp, ok = _polish(P0, A0, q0, l_raw, u_raw, xu, zu, yu, s.tol, dense, max_rounds=1)
                if ok:
                    rpp, rdp = _residuals(P0, A0, q0, l_raw, u_raw, xp, yp)
                    if rpp <= s.tol and rdp <= s.tol:
                        return QpSolution(xp, yp, OPTIMAL, rpp, rdp, it, problem.objective(xp), True)
        # infeasibility certificate from the dual increment
        dy = E * (y - y_prev)
        ndy = np.max(np.abs(dy))
        if ndy > 1e-10:
            at = np.max(np.abs(A0.T @ dy)) / ndy
            with np.errstate(invalid="ignore"):
                support = (np.sum(np.where(dy > 0, np.where(np.isfinite(u_raw), u_raw * dy, np.inf), 0.0))
                           + np.sum(np.where(dy < 0, np.where(np.isfinite(l_raw), l_raw * dy, np.inf), 0.0)))
            if at < 1e-5 and support < -1e-5 * ndy:
                status = INFEASIBLE
                break
        # adaptive step size
        Ax = A @ x
        sp_ = np.max(np.abs(Ax - z)) / max(np.max(np.abs(Ax)), np.max(np.abs(z)), 1e-10)
        Px = P @ x
        sd = np.max(np.abs(Px + q + A.T @ y)) / max(np.max(np.abs(Px)), np.max(np.abs(A.T @ y)),
                                                  np.max(np.abs(q)), 1e-10)
        if sd > 0:
            ratio = np.sqrt(sp_ / sd)
            if ratio > 5.0 or ratio < 0.2:
                rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                rv = rho_vec(rho)
                fac = factor(rv)

    xu, yu = D * x, E * y
    polished = False
    if s.polish and status != INFEASIBLE:
        xp, yp, ok = _polish(P0, A0, q0, l_raw, u_raw, xu, z / E, yu, s.tol, dense)
        if ok:
            rpp, rdp = _residuals(P0, A0, q0, l_raw, u_raw, xp, yp)
            if max(rpp, rdp) <= max(rp, rd) or max(rpp, rdp) <= s.tol:
                xu, yu, rp, rd, polished = xp, yp, rpp, rdp, True
                if max(rp, rd) <= s.tol:
                    status = OPTIMAL
    return QpSolution(xu, yu, status, rp, rd, it, problem.objective(xu), polished)


# ----------------------------------------------------------------- SQP
@dataclass(frozen=True)
class SqpSettings:
    max_iter: int = 1
    trust_region: object = None
    tol: float = 1e-6
    qp: QpSettings = field(default_factory=QpSettings)


@dataclass
class SqpResult:
    x: np.ndarray
    status: str
    iterations: int
    steps: list
    qp: QpSolution | None


def _with_trust_region(qp: QpProblem, radius) -> QpProblem:
    n = qp.n
    r = np.broadcast_to(np.asarray(radius, dtype=float), (n,))
    box = sp.eye(n, format="csr") if qp.sparse else np.eye(n)
    if qp.A_in.shape[0]:
        A_in = sp.vstack([sp.csr_matrix(qp.A_in), box]) if qp.sparse else np.vstack([qp.A_in, box])
    else:
        A_in = box
    return QpProblem(qp.H, qp.g, qp.A_eq, qp.b_eq, A_in,
                     np.concatenate([qp.lower, -r]), np.concatenate([qp.upper, r]))


def sqp_solve(build_qp, x0, settings: SqpSettings = SqpSettings()) -> SqpResult:
    """Full-step SQP with trust-region bounds on the step.

    ``build_qp(x)`` returns the local QP in the step ``p`` (new x = x + p).
    """
    x = np.asarray(x0, dtype=float).copy()
    steps = []
    last = None
    status = MAX_ITER
    it = 0
    for it in range(1, settings.max_iter + 1):
        qp = build_qp(x)
        if settings.trust_region is not None:
            qp = _with_trust_region(qp, settings.trust_region)
        sol = solve_qp(qp, settings.qp)
        last = sol
        if sol.status == INFEASIBLE or not np.all(np.isfinite(sol.x)):
            status = DEGRADED
            break
        if sol.status != OPTIMAL and max(sol.primal_residual, sol.dual_residual) > 1e3 * settings.qp.tol:
            status = DEGRADED
            break
        x = x + sol.x
        step = float(np.max(np.abs(sol.x))) if sol.x.size else 0.0
        steps.append(step)
        if step < settings.tol:
            status = OPTIMAL
            break
    else:
        status = OPTIMAL if steps and steps[-1] < settings.tol else MAX_ITER
    if settings.max_iter == 1 and status == MAX_ITER and last is not None and last.ok:
        status = OPTIMAL
    return SqpResult(x, status, it, steps, last)
