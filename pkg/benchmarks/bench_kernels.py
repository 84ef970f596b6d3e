"""Time the pure-numpy kernels against their numba-compiled twins.

Run with ``python benchmarks/bench_kernels.py``. Both paths are imported in
the same process, so ``RACER_DISABLE_NUMBA`` is irrelevant here. Each case
first checks that the two paths agree, then reports the best of several
repeats.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from racer import _kernels as K
from racer.track import random_track
from racer.vehicle import VehicleParams


def best_time(fn, repeats: int, number: int) -> float:
    fn()  # warm-up, includes compilation for the numba path
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        best = min(best, (time.perf_counter() - t0) / number)
    return best


def cases(rng):
    track = random_track(0)
    starts, kappas, phis, length, closed = track.lookup_arrays()
    p = VehicleParams.miniature().packed()
    x = np.array([2.0, 0.05, 0.3, 0.05, 0.1, 3.0])
    u = np.array([0.1, 0.5])
    xo = np.array([3.0, 0.1, 0.02, 2.0])
    uo = np.array([0.05, 0.3])
    z1 = rng.standard_normal((500, 9))
    z2 = rng.standard_normal((50, 9))
    ls = rng.uniform(0.5, 2.0, 9)

    n, m = 40, 60
    G = rng.standard_normal((n, n))
    P = G @ G.T + n * np.eye(n)
    A = rng.standard_normal((m, n))
    q = rng.standard_normal(n)
    lo, up = -np.ones(m), np.ones(m)
    rho = np.full(m, 0.1)
    minv = np.linalg.inv(P + 1e-6 * np.eye(n) + (A.T * rho) @ A)

    return {
        "plant step (20 Pacejka substeps)": lambda path: path.integrate(
            x, u, 0.1, 20, p, K.LAW_PACEJKA, np.zeros(6), starts, kappas, phis, length, closed, 1e-3)[0],
        "linearized step (10 substeps)": lambda path: path.integrate_linearized(
            x, u, 0.1, 10, p, starts, kappas, phis, length, closed)[1],
        "kinematic opponent step": lambda path: path.kinematic_integrate(
            xo, uo, 0.1, 5, 0.2, starts, kappas, length, closed),
        "SE Gram 500x50, 9-D": lambda path: path.se_gram(z1, z2, ls, 1.3),
        "Matern Gram 500x50, 9-D": lambda path: path.matern_gram(z1, z2, ls, 1.3, False),
        "ADMM 200 iterations, n=40 m=60": lambda path: path.admm(
            minv, P, q, A, lo, up, rho, 1e-6, 1.6, np.zeros(n), np.zeros(m), np.zeros(m), 200, 200, 0.0)[0],
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--number", type=int, default=50)
    args = parser.parse_args(argv)
    if K.COMPILED is K.NUMPY:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'numpy [us]':>12s} {'numba [us]':>12s} {'speedup':>8s}")
    for name, call in cases(rng).items():
        a, b = call(K.NUMPY), call(K.COMPILED)
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12, err_msg=name)
        t_np = best_time(lambda: call(K.NUMPY), args.repeats, args.number)
        t_nb = best_time(lambda: call(K.COMPILED), args.repeats, args.number)
        print(f"{name:36s} {1e6 * t_np:12.1f} {1e6 * t_nb:12.1f} {t_np / t_nb:8.1f}")


if __name__ == "__main__":
    main()
