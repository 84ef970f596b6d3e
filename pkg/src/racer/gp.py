"""Exact multi-output Gaussian-process regression.

All outputs share one kernel; each output has its own noise variance and
therefore its own Cholesky factor (outputs with equal noise share a factor).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from . import _kernels as K
from .errors import ConfigError, DimensionMismatch, FactorizationFailed

SE = "squared_exponential"
MATERN = "matern32"
FAMILIES = (SE, MATERN)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KernelSpec:
    """Stationary covariance function.

    ``lengthscales`` holds one value per input dimension, or a single value
    shared by all dimensions. ``squared_distance`` swaps the Matérn distance
    for its square (comparison switch; the default is the Euclidean norm).
    """

    family: str = SE
    variance: float = 1.0
    lengthscales: tuple = (1.0,)
    squared_distance: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown kernel family {self.family!r}")
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        if not self.variance > 0 or min(ls) <= 0:
            raise ConfigError("kernel variance and length-scales must be positive")

    def scales(self, dim: int) -> np.ndarray:
        ls = np.asarray(self.lengthscales, dtype=float)
        if ls.size == 1:
            return np.full(dim, ls[0])
        if ls.size != dim:
            raise DimensionMismatch(f"kernel has {ls.size} length-scales, inputs have {dim} dims")
        return ls

    def gram(self, z1, z2) -> np.ndarray:
        z1 = np.ascontiguousarray(np.atleast_2d(z1), dtype=float)
        z2 = np.ascontiguousarray(np.atleast_2d(z2), dtype=float)
        ls = self.scales(z1.shape[1])
        if self.family == SE:
            return K.ACTIVE.se_gram(z1, z2, ls, float(self.variance))
        return K.ACTIVE.matern_gram(z1, z2, ls, float(self.variance), bool(self.squared_distance))

    def to_dict(self) -> dict:
        return {"family": self.family, "variance": self.variance,
                "lengthscales": list(self.lengthscales), "squared_distance": self.squared_distance}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(d["family"], d["variance"], tuple(d["lengthscales"]), d.get("squared_distance", False))


def kernel_eval(spec: KernelSpec, z, zp) -> float:
    return float(spec.gram(np.atleast_1d(z)[None, :], np.atleast_1d(zp)[None, :])[0, 0])


class GpDataset:
    """Bounded store of (z, y) pairs kept as dense arrays."""

    def __init__(self, n_z: int, n_y: int, capacity: int = 2000):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        self.n_z, self.n_y, self.capacity = n_z, n_y, capacity
        self._z = np.empty((capacity, n_z))
        self._y = np.empty((capacity, n_y))
        self.size = 0

    def __len__(self):
        return self.size

    @property
    def Z(self) -> np.ndarray:
        return self._z[: self.size]

    @property
    def Y(self) -> np.ndarray:
        return self._y[: self.size]

    @property
    def full(self) -> bool:
        return self.size >= self.capacity

    def _check(self, z, y):
        z = np.asarray(z, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        if z.size != self.n_z or y.size != self.n_y:
            raise DimensionMismatch(f"expected ({self.n_z}, {self.n_y}), got ({z.size}, {y.size})")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
            raise ValueError("observations must be finite")
        return z, y

    def add(self, z, y) -> int:
        z, y = self._check(z, y)
        if self.full:
            raise IndexError("dataset at capacity")
        self._z[self.size], self._y[self.size] = z, y
        self.size += 1
        return self.size - 1

    def replace(self, index: int, z, y) -> None:
        z, y = self._check(z, y)
        if not 0 <= index < self.size:
            raise IndexError(index)
        self._z[index], self._y[index] = z, y

    def extend(self, Z, Y) -> None:
        for z, y in zip(np.atleast_2d(Z), np.atleast_2d(Y)):
            self.add(z, y)

    def copy(self) -> "GpDataset":
        out = GpDataset(self.n_z, self.n_y, self.capacity)
        if self.size:
            out.extend(self.Z, self.Y)
        return out

    @classmethod
    def from_arrays(cls, Z, Y, capacity: int | None = None) -> "GpDataset":
        Z, Y = np.atleast_2d(Z), np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        out = cls(Z.shape[1], Y.shape[1], capacity or max(len(Z), 1))
        out.extend(Z, Y)
        return out

    def to_dict(self) -> dict:
        return {"inputs": self.Z.tolist(), "outputs": self.Y.tolist(), "capacity": self.capacity,
                "n_z": self.n_z, "n_y": self.n_y}

    @classmethod
    def from_dict(cls, d: dict) -> "GpDataset":
        out = cls(d["n_z"], d["n_y"], d["capacity"])
        if d["inputs"]:
            out.extend(np.asarray(d["inputs"]), np.asarray(d["outputs"]))
        return out


def _factor(Kmat: np.ndarray, noise: float) -> np.ndarray:
    """Lower Cholesky factor of ``K + noise*I`` with adaptive diagonal jitter."""
    n = Kmat.shape[0]
    A = Kmat + noise * np.eye(n)
    try:
        return cholesky(A, lower=True, check_finite=False)
    except LinAlgError:
        pass
    scale = float(np.mean(np.diag(A)))
    jitter = 1e-10 * scale
    while jitter <= 1e-4 * scale * (1 + 1e-9):
        try:
            return cholesky(A + jitter * np.eye(n), lower=True, check_finite=False)
        except LinAlgError:
            jitter *= 10.0
    raise FactorizationFailed("covariance not positive definite within the jitter ceiling")


@dataclass
class GpModel:
    """Posterior of a GP conditioned on a dataset snapshot."""

    Z: np.ndarray
    Y: np.ndarray
    kernel: KernelSpec
    noise: np.ndarray
    chol: list = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def n_z(self) -> int:
        return self.Z.shape[1]

    @property
    def n_y(self) -> int:
        return self.Y.shape[1]

    def __len__(self):
        return self.Z.shape[0]

    def predict(self, zq):
        """Posterior mean and variance; 1-D query gives 1-D outputs."""
        single = np.ndim(zq) == 1
        zq = np.atleast_2d(np.asarray(zq, dtype=float))
        if zq.shape[1] != self.n_z:
            raise DimensionMismatch(f"query has {zq.shape[1]} dims, model expects {self.n_z}")
        ks = self.kernel.gram(self.Z, zq)
        mu = ks.T @ self.weights
        var = np.empty_like(mu)
        prior = self.kernel.variance
        cache = {}
        for d in range(self.n_y):
            L = self.chol[d]
            key = id(L)
            if key not in cache:
                v = solve_triangular(L, ks, lower=True, check_finite=False)
                cache[key] = np.maximum(prior - np.einsum("ij,ij->j", v, v), 0.0)
            var[:, d] = cache[key]
        if single:
            return mu[0], var[0]
        return mu, var

    def log_marginal_likelihood(self) -> np.ndarray:
        n = len(self)
        out = np.empty(self.n_y)
        for d in range(self.n_y):
            L = self.chol[d]
            out[d] = (-0.5 * self.Y[:, d] @ self.weights[:, d]
                      - np.sum(np.log(np.diag(L))) - 0.5 * n * _LOG_2PI)
        return out

    def inverse_diagonal(self) -> np.ndarray:
        """Diagonal of (K + sigma_d^2 I)^-1 per output, shape (n, n_y)."""
        n = len(self)
        out = np.empty((n, self.n_y))
        cache = {}
        for d in range(self.n_y):
            L = self.chol[d]
            key = id(L)
            if key not in cache:
                Linv = solve_triangular(L, np.eye(n), lower=True, check_finite=False)
                cache[key] = np.einsum("ij,ij->j", Linv, Linv)
            out[:, d] = cache[key]
        return out

    def to_dict(self) -> dict:
        return {"inputs": self.Z.tolist(), "outputs": self.Y.tolist(),
                "kernel": self.kernel.to_dict(), "noise": self.noise.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GpModel":
        return fit((np.asarray(d["inputs"], dtype=float), np.asarray(d["outputs"], dtype=float)),
                   KernelSpec.from_dict(d["kernel"]), np.asarray(d["noise"], dtype=float))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GpModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_arrays(data):
    if isinstance(data, GpDataset):
        return data.Z.copy(), data.Y.copy()
    Z, Y = data
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    return Z.copy(), Y.copy()


def fit(data, kernel: KernelSpec, noise) -> GpModel:
    """Condition a GP on ``data`` (a GpDataset or a ``(Z, Y)`` pair)."""
    Z, Y = _as_arrays(data)
    if Z.shape[0] == 0:
        raise ValueError("cannot fit a GP to an empty dataset")
    noise = np.broadcast_to(np.asarray(noise, dtype=float), (Y.shape[1],)).copy()
    Kmat = kernel.gram(Z, Z)
    chol, factors = [], {}
    W = np.empty_like(Y)
    for d in range(Y.shape[1]):
        key = float(noise[d])
        if key not in factors:
            factors[key] = _factor(Kmat, key)
        L = factors[key]
        chol.append(L)
        W[:, d] = cho_solve((L, True), Y[:, d], check_finite=False)
    return GpModel(Z, Y, kernel, noise, chol, W)


def predict(model: GpModel, zq):
    return model.predict(zq)


def log_marginal_likelihood(model: GpModel) -> np.ndarray:
    return model.log_marginal_likelihood()


# ----------------------------------------------------------- hyperparameters
@dataclass(frozen=True)
class HyperFit:
    kernel: KernelSpec
    noise: np.ndarray
    evidence: float


def _unpack(theta, family, n_ls, squared):
    kern = KernelSpec(family, math.exp(theta[0]), tuple(np.exp(theta[1:1 + n_ls])), squared)
    return kern, np.exp(theta[1 + n_ls:])


def evidence_and_gradient(Z, Y, kernel: KernelSpec, noise, ard: bool = True):
    """Summed log evidence and its gradient in log-parameters.

    Parameter order: log variance, log length-scales (one per dimension when
    ``ard``, else one shared), log noise per output.
    """
    n, n_z = Z.shape
    noise = np.broadcast_to(np.asarray(noise, dtype=float), (Y.shape[1],))
    ls = kernel.scales(n_z)
    Kmat = kernel.gram(Z, Z)
    diff2 = (Z[:, None, :] - Z[None, :, :]) ** 2 / ls ** 2
    if kernel.family == SE:
        dk = Kmat
    else:
        r2 = diff2.sum(-1)
        rho = r2 if kernel.squared_distance else np.sqrt(r2)
        coef = 6.0 * rho if kernel.squared_distance else 3.0
        dk = coef * kernel.variance * np.exp(-math.sqrt(3.0) * rho)
    total = 0.0
    Wsum = np.zeros((n, n))
    g_noise = np.empty(Y.shape[1])
    cache = {}
    for d in range(Y.shape[1]):
        key = float(noise[d])
        if key not in cache:
            L = _factor(Kmat, key)
            Ainv = cho_solve((L, True), np.eye(n), check_finite=False)
            cache[key] = (L, Ainv)
        L, Ainv = cache[key]
        a = Ainv @ Y[:, d]
        total += -0.5 * Y[:, d] @ a - np.sum(np.log(np.diag(L))) - 0.5 * n * _LOG_2PI
        W = np.outer(a, a) - Ainv
        Wsum += W
        g_noise[d] = 0.5 * noise[d] * np.trace(W)
    g_var = 0.5 * np.sum(Wsum * Kmat)
    g_ls = 0.5 * np.einsum("ij,ij,ijk->k", Wsum, dk, diff2)
    if not ard:
        g_ls = np.array([g_ls.sum()])
    return total, np.concatenate([[g_var], g_ls, g_noise])


def optimize_hyperparameters(data, family: str = SE, noise=None, restarts: int = 3, seed: int = 0,
                             iterations: int = 200, ard: bool | None = None,
                             max_points: int = 250, squared_distance: bool = False,
                             initial: HyperFit | None = None, noise_floor: float = 1e-6) -> HyperFit:
    """Maximize the summed log evidence from several seeded starting points.

    Optimizes log-parameters (signal variance, length-scales, per-output
    noise) with bounded L-BFGS and analytic gradients, ``iterations`` steps per
    start. Large datasets are thinned to ``max_points`` by a seeded subsample.
    ``noise`` fixes the noise variances when given. The best point found,
    including every starting point, is returned.
    """
    Z, Y = _as_arrays(data)
    rng = np.random.default_rng(seed)
    if len(Z) > max_points:
        keep = np.sort(rng.choice(len(Z), max_points, replace=False))
        Z, Y = Z[keep], Y[keep]
    n_z, n_y = Z.shape[1], Y.shape[1]
    if ard is None:
        ard = family == SE
    n_ls = n_z if ard else 1
    yvar = float(np.mean(np.var(Y, axis=0))) + 1e-12
    zstd = np.maximum(np.std(Z, axis=0), 1e-3)
    fixed = None if noise is None else np.broadcast_to(np.asarray(noise, float), (n_y,)).copy()
    n_free = 1 + n_ls + (n_y if fixed is None else 0)

    def pack(kern: KernelSpec, nz):
        ls = np.asarray(kern.scales(n_z)) if ard else np.array([np.mean(kern.lengthscales)])
        parts = [[math.log(kern.variance)], np.log(ls)]
        if fixed is None:
            parts.append(np.log(np.maximum(nz, noise_floor * yvar)))
        return np.concatenate(parts)

    def negative(theta):
        full = theta if fixed is None else np.concatenate([theta, np.log(fixed)])
        kern, nz = _unpack(full, family, n_ls, squared_distance)
        try:
            val, grad = evidence_and_gradient(Z, Y, kern, nz, ard)
        except FactorizationFailed:
            return 1e300, np.zeros(n_free)
        return -val, -grad[:n_free]

    base_ls = zstd if ard else np.array([float(np.mean(zstd))])
    base = KernelSpec(family, yvar, tuple(base_ls), squared_distance)
    starts = [pack(base, np.full(n_y, 0.1 * yvar) if fixed is None else fixed)]
    if initial is not None:
        starts.append(pack(initial.kernel, initial.noise))
    while len(starts) < restarts + (initial is not None):
        starts.append(starts[0] + rng.normal(0.0, 1.0, n_free))
    lo = np.full(n_free, math.log(1e-4 * yvar))
    hi = np.full(n_free, math.log(1e2 * yvar))
    lo[1:1 + n_ls] = np.log(1e-2 * base_ls)
    hi[1:1 + n_ls] = np.log(1e2 * base_ls)
    if fixed is None:
        lo[1 + n_ls:] = math.log(noise_floor * yvar)
        hi[1 + n_ls:] = math.log(10.0 * yvar)

    best_theta, best_val = None, np.inf
    for theta0 in starts:
        theta0 = np.clip(theta0, lo, hi)
        v0, _ = negative(theta0)
        if v0 < best_val:
            best_theta, best_val = theta0, v0
        res = minimize(negative, theta0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options={"maxiter": iterations})
        if res.fun < best_val:
            best_theta, best_val = np.asarray(res.x), float(res.fun)
    full = best_theta if fixed is None else np.concatenate([best_theta, np.log(fixed)])
    kern, nz = _unpack(full, family, n_ls, squared_distance)
    return HyperFit(kern, nz, -best_val)
