"""Hot numeric kernels.

Each kernel exists as plain Python/numpy source. When numba is active the
scalar-loop variants are compiled; otherwise the numpy variants are used.
``NUMPY`` and ``COMPILED`` expose both paths explicitly for the benchmark and
for cross-checking tests.
"""

from __future__ import annotations

import math
import types

import numpy as np

from ._accel import HAVE_NUMBA, USE_NUMBA, jit

# layout of the packed vehicle parameter vector
P_M, P_LF, P_LR, P_IZZ, P_MU, P_CXW, P_CR, P_G = range(8)
P_CAF, P_CAR, P_BF, P_CF, P_DF, P_BR, P_CRR, P_DR, P_EPS = range(8, 17)
N_PARAMS = 17

LAW_LINEAR = 0
LAW_PACEJKA = 1


# --------------------------------------------------------------- track lookup
def _piece_index(starts, s):
    lo = 0
    hi = starts.shape[0] - 1
    if s < starts[0]:
        return 0
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if starts[mid] <= s:
            lo = mid
        else:
            hi = mid - 1
    return lo


def _wrap_s(s, length, closed):
    if closed:
        s = s % length
        if s < 0.0:
            s += length
        if s >= length:
            s = 0.0
    return s


def _wrap_angle(a):
    a = (a + math.pi) % (2.0 * math.pi) - math.pi
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


# ------------------------------------------------------------ bicycle model
def _slip_angles(x, u, p):
    vx = max(x[0], p[P_EPS])
    a_f = u[0] - math.atan2(x[1] + p[P_LF] * x[2], vx)
    a_r = -math.atan2(x[1] - p[P_LR] * x[2], vx)
    return a_f, a_r


def _tire_lateral(alpha, axle, p, law):
    if law == LAW_LINEAR:
        return (p[P_CAF] if axle == 0 else p[P_CAR]) * alpha
    wb = p[P_LF] + p[P_LR]
    if axle == 0:
        load = p[P_M] * p[P_G] * p[P_LR] / wb
        d = p[P_MU] * load * p[P_DF]
        return d * math.sin(p[P_CF] * math.atan(p[P_BF] * alpha))
    load = p[P_M] * p[P_G] * p[P_LF] / wb
    d = p[P_MU] * load * p[P_DR]
    return d * math.sin(p[P_CRR] * math.atan(p[P_BR] * alpha))


def bicycle_rhs(x, u, kappa, phi, p, law):
    """Time derivative of the Frenet-frame dynamic bicycle state."""
    vx, vy, r, epsi, ey = x[0], x[1], x[2], x[3], x[4]
    delta, ax = u[0], u[1]
    a_f, a_r = _slip_angles(x, u, p)
    fyf = _tire_lateral(a_f, 0, p, law)
    fyr = _tire_lateral(a_r, 1, p, law)
    m = p[P_M]
    sgn = 1.0 if vx > 0.0 else (-1.0 if vx < 0.0 else 0.0)
    rx = p[P_CR] * m * p[P_G] * sgn
    fxw = p[P_CXW] * vx * vx
    sdot = (vx * math.cos(epsi) - vy * math.sin(epsi)) / (1.0 - kappa * ey)
    out = np.empty(6)
    out[0] = ax - (fyf * math.sin(delta) + rx + fxw) / m - p[P_G] * math.sin(phi) + r * vy
    out[1] = (fyf * math.cos(delta) + fyr) / m - r * vx
    out[2] = (p[P_LF] * fyf * math.cos(delta) - p[P_LR] * fyr) / p[P_IZZ]
    out[3] = r - sdot * kappa
    out[4] = vx * math.sin(epsi) + vy * math.cos(epsi)
    out[5] = sdot
    return out


def bicycle_jacobian(x, u, kappa, p):
    """Analytic Jacobians of ``bicycle_rhs`` for the linear tire law."""
    vx, vy, r, epsi, ey = x[0], x[1], x[2], x[3], x[4]
    delta = u[0]
    m, lf, lr, izz = p[P_M], p[P_LF], p[P_LR], p[P_IZZ]
    caf, car = p[P_CAF], p[P_CAR]
    vxe = max(vx, p[P_EPS])
    dvxe = 1.0 if vx > p[P_EPS] else 0.0
    nf = vy + lf * r
    nr = vy - lr * r
    df = nf * nf + vxe * vxe
    dr = nr * nr + vxe * vxe
    # partials of slip angles w.r.t. (vx, vy, r)
    af_vx = nf / df * dvxe
    af_vy = -vxe / df
    af_r = -lf * vxe / df
    ar_vx = nr / dr * dvxe
    ar_vy = -vxe / dr
    ar_r = lr * vxe / dr
    a_f = delta - math.atan2(nf, vxe)
    a_r = -math.atan2(nr, vxe)
    fyf = caf * a_f
    fyr = car * a_r
    sd, cd = math.sin(delta), math.cos(delta)
    se, ce = math.sin(epsi), math.cos(epsi)
    den = 1.0 - kappa * ey
    num = vx * ce - vy * se

    jx = np.zeros((6, 6))
    ju = np.zeros((6, 2))
    jx[0, 0] = -(caf * af_vx * sd + 2.0 * p[P_CXW] * vx) / m
    jx[0, 1] = -caf * af_vy * sd / m + r
    jx[0, 2] = -caf * af_r * sd / m + vy
    ju[0, 0] = -(caf * sd + fyf * cd) / m
    ju[0, 1] = 1.0

    jx[1, 0] = (caf * af_vx * cd + car * ar_vx) / m - r
    jx[1, 1] = (caf * af_vy * cd + car * ar_vy) / m
    jx[1, 2] = (caf * af_r * cd + car * ar_r) / m - vx
    ju[1, 0] = (caf * cd - fyf * sd) / m

    jx[2, 0] = (lf * caf * af_vx * cd - lr * car * ar_vx) / izz
    jx[2, 1] = (lf * caf * af_vy * cd - lr * car * ar_vy) / izz
    jx[2, 2] = (lf * caf * af_r * cd - lr * car * ar_r) / izz
    ju[2, 0] = lf * (caf * cd - fyf * sd) / izz

    ds_vx = ce / den
    ds_vy = -se / den
    ds_ep = (-vx * se - vy * ce) / den
    ds_ey = num * kappa / (den * den)
    jx[5, 0] = ds_vx
    jx[5, 1] = ds_vy
    jx[5, 3] = ds_ep
    jx[5, 4] = ds_ey

    jx[3, 0] = -kappa * ds_vx
    jx[3, 1] = -kappa * ds_vy
    jx[3, 2] = 1.0
    jx[3, 3] = -kappa * ds_ep
    jx[3, 4] = -kappa * ds_ey

    jx[4, 0] = se
    jx[4, 1] = ce
    jx[4, 3] = vx * ce - vy * se
    return jx, ju


def integrate(x, u, dt, n_sub, p, law, bias, starts, kappas, phis, length, closed, guard):
    """``n_sub`` forward-Euler substeps of ``dt / n_sub``.

    ``bias`` is added to the state derivative. Returns the new state and a
    status flag (0 ok, 1 singular Frenet frame).
    """
    h = dt / n_sub
    xc = x.copy()
    for _ in range(n_sub):
        sw = _wrap_s(xc[5], length, closed)
        i = _piece_index(starts, sw)
        kappa = kappas[i]
        if 1.0 - kappa * xc[4] <= guard:
            return xc, 1
        f = bicycle_rhs(xc, u, kappa, phis[i], p, law)
        for j in range(6):
            xc[j] += h * (f[j] + bias[j])
    xc[3] = _wrap_angle(xc[3])
    xc[5] = _wrap_s(xc[5], length, closed)
    return xc, 0


def integrate_linearized(x, u, dt, n_sub, p, starts, kappas, phis, length, closed):
    """Substepped Euler step (linear tires) and its chained Jacobians."""
    h = dt / n_sub
    xc = x.copy()
    a = np.eye(6)
    b = np.zeros((6, 2))
    for _ in range(n_sub):
        sw = _wrap_s(xc[5], length, closed)
        i = _piece_index(starts, sw)
        kappa = kappas[i]
        f = bicycle_rhs(xc, u, kappa, phis[i], p, LAW_LINEAR)
        jx, ju = bicycle_jacobian(xc, u, kappa, p)
        step_a = np.eye(6) + h * jx
        b = step_a @ b + h * ju
        a = step_a @ a
        for j in range(6):
            xc[j] += h * f[j]
    return xc, a, b


# ---------------------------------------------------- kinematic opponent car
def kinematic_integrate(xo, uo, dt, n_sub, wheelbase, starts, kappas, length, closed):
    """Frenet kinematic bicycle, state [s, e_y, e_psi, v], input [delta, a]."""
    h = dt / n_sub
    xc = xo.copy()
    for _ in range(n_sub):
        sw = _wrap_s(xc[0], length, closed)
        kappa = kappas[_piece_index(starts, sw)]
        s, ey, ep, v = xc[0], xc[1], xc[2], xc[3]
        sdot = v * math.cos(ep) / (1.0 - kappa * ey)
        xc[0] = s + h * sdot
        xc[1] = ey + h * v * math.sin(ep)
        xc[2] = ep + h * (v * math.tan(uo[0]) / wheelbase - kappa * sdot)
        xc[3] = max(v + h * uo[1], 0.0)
    return xc


# ------------------------------------------------------------- Gram matrices
def se_gram_numpy(z1, z2, lengthscales, variance):
    a = z1 / lengthscales
    b = z2 / lengthscales
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    np.maximum(sq, 0.0, out=sq)
    return variance * np.exp(-0.5 * sq)


def se_gram_loops(z1, z2, lengthscales, variance):
    n1, n2, d = z1.shape[0], z2.shape[0], z1.shape[1]
    out = np.empty((n1, n2))
    for i in range(n1):
        for j in range(n2):
            acc = 0.0
            for k in range(d):
                t = (z1[i, k] - z2[j, k]) / lengthscales[k]
                acc += t * t
            out[i, j] = variance * math.exp(-0.5 * acc)
    return out


def matern_gram_numpy(z1, z2, lengthscales, variance, squared):
    a = z1 / lengthscales
    b = z2 / lengthscales
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    np.maximum(sq, 0.0, out=sq)
    r = sq if squared else np.sqrt(sq)
    t = math.sqrt(3.0) * r
    return variance * (1.0 + t) * np.exp(-t)


def matern_gram_loops(z1, z2, lengthscales, variance, squared):
    n1, n2, d = z1.shape[0], z2.shape[0], z1.shape[1]
    out = np.empty((n1, n2))
    s3 = math.sqrt(3.0)
    for i in range(n1):
        for j in range(n2):
            acc = 0.0
            for k in range(d):
                t = (z1[i, k] - z2[j, k]) / lengthscales[k]
                acc += t * t
            r = acc if squared else math.sqrt(acc)
            out[i, j] = variance * (1.0 + s3 * r) * math.exp(-s3 * r)
    return out


# ------------------------------------------------------------- ADMM iterations
def admm_numpy(minv, p, q, a, lo, up, rho, sigma, relax, x, z, y, n_iter, check_every, eps):
    """Dense OSQP-style iterations with a precomputed reduced-KKT inverse."""
    at = a.T
    it = 0
    rp = rd = np.inf
    while it < n_iter:
        xt = minv @ (sigma * x - q + at @ (rho * z - y))
        zt = a @ xt
        x = relax * xt + (1.0 - relax) * x
        zr = relax * zt + (1.0 - relax) * z
        z_new = np.minimum(np.maximum(zr + y / rho, lo), up)
        y = y + rho * (zr - z_new)
        z = z_new
        it += 1
        if it % check_every == 0:
            rp = np.max(np.abs(a @ x - z)) if a.shape[0] else 0.0
            rd = np.max(np.abs(p @ x + q + at @ y))
            if rp <= eps and rd <= eps:
                break
    return x, z, y, it, rp, rd


def admm_loops(minv, p, q, a, lo, up, rho, sigma, relax, x, z, y, n_iter, check_every, eps):
    n = x.shape[0]
    m = z.shape[0]
    x = x.copy()
    z = z.copy()
    y = y.copy()
    rhs = np.empty(n)
    w = np.empty(m)
    xt = np.empty(n)
    it = 0
    rp = np.inf
    rd = np.inf
    while it < n_iter:
        for i in range(m):
            w[i] = rho[i] * z[i] - y[i]
        for j in range(n):
            acc = sigma * x[j] - q[j]
            for i in range(m):
                acc += a[i, j] * w[i]
            rhs[j] = acc
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += minv[j, k] * rhs[k]
            xt[j] = acc
        for j in range(n):
            x[j] = relax * xt[j] + (1.0 - relax) * x[j]
        for i in range(m):
            zt = 0.0
            for j in range(n):
                zt += a[i, j] * xt[j]
            zr = relax * zt + (1.0 - relax) * z[i]
            zn = zr + y[i] / rho[i]
            if zn < lo[i]:
                zn = lo[i]
            elif zn > up[i]:
                zn = up[i]
            y[i] += rho[i] * (zr - zn)
            z[i] = zn
        it += 1
        if it % check_every == 0:
            rp = 0.0
            for i in range(m):
                acc = -z[i]
                for j in range(n):
                    acc += a[i, j] * x[j]
                rp = max(rp, abs(acc))
            rd = 0.0
            for j in range(n):
                acc = q[j]
                for k in range(n):
                    acc += p[j, k] * x[k]
                for i in range(m):
                    acc += a[i, j] * y[i]
                rd = max(rd, abs(acc))
            if rp <= eps and rd <= eps:
                break
    return x, z, y, it, rp, rd


class _Path:
    def __init__(self, **fns):
        self.__dict__.update(fns)


NUMPY = _Path(
    bicycle_rhs=bicycle_rhs,
    bicycle_jacobian=bicycle_jacobian,
    integrate=integrate,
    integrate_linearized=integrate_linearized,
    kinematic_integrate=kinematic_integrate,
    se_gram=se_gram_numpy,
    matern_gram=matern_gram_numpy,
    admm=admm_numpy,
)

def _compile_all():
    """Compile every kernel in a private namespace so calls between kernels
    resolve to compiled versions while the numpy path stays pure Python."""
    names = [
        "_piece_index", "_wrap_s", "_wrap_angle", "_slip_angles", "_tire_lateral",
        "bicycle_rhs", "bicycle_jacobian", "integrate", "integrate_linearized",
        "kinematic_integrate", "se_gram_loops", "matern_gram_loops", "admm_loops",
    ]
    ns = dict(globals())
    for name in names:
        fn = globals()[name]
        clone = types.FunctionType(fn.__code__, ns, name, fn.__defaults__, fn.__closure__)
        ns[name] = jit(clone, cache=False)
    return _Path(
        bicycle_rhs=ns["bicycle_rhs"],
        bicycle_jacobian=ns["bicycle_jacobian"],
        integrate=ns["integrate"],
        integrate_linearized=ns["integrate_linearized"],
        kinematic_integrate=ns["kinematic_integrate"],
        se_gram=ns["se_gram_loops"],
        matern_gram=ns["matern_gram_loops"],
        admm=ns["admm_loops"],
    )


COMPILED = _compile_all() if HAVE_NUMBA else NUMPY
ACTIVE = COMPILED if USE_NUMBA else NUMPY
