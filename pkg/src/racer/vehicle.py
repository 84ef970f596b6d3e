"""Dynamic bicycle model in Frenet coordinates.

The nominal model used by the controllers has linear tires. The plant used
to simulate "reality" swaps in magic-formula tires, scales mass and yaw
inertia and integrates with finer substeps, which produces the model
mismatch the learned corrections have to capture.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import ConfigError, NearSingularFrenet
from .track import Track, wrap_angle

STATE_NAMES = ("vx", "vy", "r", "epsi", "ey", "s")
INPUT_NAMES = ("delta", "ax")
VX, VY, R, EPSI, EY, S = range(6)

SINGULARITY_GUARD = 0.05


@dataclass(frozen=True)
class PacejkaAxle:
    B: float = 6.0
    C: float = 1.9
    D_scale: float = 1.0


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters of the single-track model (SI units)."""

    m: float = 1161.25
    l_f: float = 1.0234
    l_r: float = 1.4826
    I_zz: float = 2106.9543
    h_c: float = 0.5136
    mu: float = 1.5
    C_xw: float = 0.1412
    c_r: float = 0.01
    g: float = 9.81
    C_af: float | None = None
    C_ar: float | None = None
    pacejka_front: PacejkaAxle = field(default_factory=PacejkaAxle)
    pacejka_rear: PacejkaAxle = field(default_factory=PacejkaAxle)
    eps_vx: float = 0.5
    length: float = 4.5
    width: float = 1.983

    def __post_init__(self):
        for name in ("m", "l_f", "l_r", "I_zz", "mu", "g", "eps_vx"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"vehicle parameter {name} must be positive")
        if isinstance(self.pacejka_front, dict):
            object.__setattr__(self, "pacejka_front", PacejkaAxle(**self.pacejka_front))
        if isinstance(self.pacejka_rear, dict):
            object.__setattr__(self, "pacejka_rear", PacejkaAxle(**self.pacejka_rear))
        # default cornering stiffness = small-slip slope of the magic formula
        fzf, fzr = self.static_loads()
        if self.C_af is None:
            pf = self.pacejka_front
            object.__setattr__(self, "C_af", pf.B * pf.C * pf.D_scale * self.mu * fzf)
        if self.C_ar is None:
            pr = self.pacejka_rear
            object.__setattr__(self, "C_ar", pr.B * pr.C * pr.D_scale * self.mu * fzr)

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r

    def static_loads(self, m: float | None = None) -> tuple[float, float]:
        m = self.m if m is None else m
        w = m * self.g / (self.l_f + self.l_r)
        return w * self.l_r, w * self.l_f

    def packed(self, m_scale: float = 1.0, izz_scale: float = 1.0) -> np.ndarray:
        """Flat parameter vector in the layout expected by the kernels."""
        p = np.zeros(K.N_PARAMS)
        p[K.P_M] = self.m * m_scale
        p[K.P_LF] = self.l_f
        p[K.P_LR] = self.l_r
        p[K.P_IZZ] = self.I_zz * izz_scale
        p[K.P_MU] = self.mu
        p[K.P_CXW] = self.C_xw
        p[K.P_CR] = self.c_r
        p[K.P_G] = self.g
        p[K.P_CAF] = self.C_af
        p[K.P_CAR] = self.C_ar
        p[K.P_BF], p[K.P_CF], p[K.P_DF] = (
            self.pacejka_front.B, self.pacejka_front.C, self.pacejka_front.D_scale)
        p[K.P_BR], p[K.P_CRR], p[K.P_DR] = (
            self.pacejka_rear.B, self.pacejka_rear.C, self.pacejka_rear.D_scale)
        p[K.P_EPS] = self.eps_vx
        return p

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VehicleParams":
        d = dict(d)
        for key in ("pacejka_front", "pacejka_rear"):
            if key in d and isinstance(d[key], dict):
                d[key] = PacejkaAxle(**d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "VehicleParams":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def default(cls) -> "VehicleParams":
        text = resources.files("racer.data").joinpath("vehicle_default.json").read_text()
        return cls.from_dict(json.loads(text))

    @classmethod
    def miniature(cls) -> "VehicleParams":
        """Small car (0.3 m x 0.2 m) for the narrow head-to-head tracks."""
        text = resources.files("racer.data").joinpath("vehicle_miniature.json").read_text()
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class PlantConfig:
    """How the simulated plant departs from the nominal model."""

    m_scale: float = 1.08
    izz_scale: float = 1.15
    substeps: int = 10
    tire: str = "pacejka"
    bias: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def identical(cls) -> "PlantConfig":
        """Plant that reproduces the nominal model (with 10 substeps)."""
        return cls(m_scale=1.0, izz_scale=1.0, tire="linear")


@dataclass(frozen=True)
class LinearizedDynamics:
    A: np.ndarray
    B: np.ndarray
    d: np.ndarray

    def __call__(self, x, u):
        return self.A @ x + self.B @ u + self.d


def _law(tire: str) -> int:
    if tire == "linear":
        return K.LAW_LINEAR
    if tire == "pacejka":
        return K.LAW_PACEJKA
    raise ConfigError(f"unknown tire law {tire!r}")


def tire_force(axle: str, slip_angle, normal_load: float, p: VehicleParams, law: str = "linear"):
    """Lateral tire force of one axle."""
    if axle not in ("front", "rear"):
        raise ConfigError(f"unknown axle {axle!r}")
    front = axle == "front"
    if law == "linear":
        return (p.C_af if front else p.C_ar) * np.asarray(slip_angle)
    if law == "pacejka":
        c = p.pacejka_front if front else p.pacejka_rear
        d = p.mu * normal_load * c.D_scale
        return d * np.sin(c.C * np.arctan(c.B * np.asarray(slip_angle)))
    raise ConfigError(f"unknown tire law {law!r}")


def slip_angles(x, u, p: VehicleParams) -> tuple[float, float]:
    vx = max(x[VX], p.eps_vx)
    a_f = u[0] - math.atan2(x[VY] + p.l_f * x[R], vx)
    a_r = -math.atan2(x[VY] - p.l_r * x[R], vx)
    return a_f, a_r


def _check_frenet(track: Track, x) -> tuple[float, float]:
    kappa = float(track.curvature_at(x[S]))
    if 1.0 - kappa * x[EY] <= SINGULARITY_GUARD:
        raise NearSingularFrenet(f"1 - kappa*e_y = {1.0 - kappa * x[EY]:.4f} at s={x[S]:.3f}")
    return kappa, float(track.inclination_at(x[S]))


def continuous_dynamics(x, u, p: VehicleParams, track: Track, tire: str = "linear") -> np.ndarray:
    """State derivative of the bicycle model at ``(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    kappa, phi = _check_frenet(track, x)
    return K.ACTIVE.bicycle_rhs(x, u, kappa, phi, p.packed(), _law(tire))


def _integrate(x, u, packed, law, bias, track: Track, T: float, substeps: int):
    starts, kappas, phis, length, closed = track.lookup_arrays()
    out, status = K.ACTIVE.integrate(
        np.asarray(x, dtype=float), np.asarray(u, dtype=float), float(T), int(substeps),
        packed, law, np.asarray(bias, dtype=float), starts, kappas, phis,
        float(length), bool(closed), SINGULARITY_GUARD)
    if status:
        raise NearSingularFrenet(f"Frenet frame singular near s={out[S]:.3f}, e_y={out[EY]:.3f}")
    return out


def euler_step(x, u, p: VehicleParams, track: Track, T: float, tire: str = "linear",
               substeps: int = 1) -> np.ndarray:
    """Forward-Euler step of length ``T`` (optionally split into substeps)."""
    return _integrate(x, u, p.packed(), _law(tire), np.zeros(6), track, T, substeps)


def plant_step(x, u, p: VehicleParams, track: Track, T: float,
               plant: PlantConfig = PlantConfig()) -> np.ndarray:
    """Advance the simulated plant by ``T``; deterministic."""
    packed = p.packed(plant.m_scale, plant.izz_scale)
    return _integrate(x, u, packed, _law(plant.tire), plant.bias, track, T, plant.substeps)


def linearize(x, u, p: VehicleParams, track: Track, T: float, substeps: int = 1) -> LinearizedDynamics:
    """Affine one-step model of the linear-tire dynamics around ``(x, u)``.

    With ``substeps > 1`` the Jacobians are chained through the substeps, so
    the affine model reproduces the substepped Euler map at the expansion point.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_frenet(track, x)
    starts, kappas, phis, length, closed = track.lookup_arrays()
    xn, a, b = K.ACTIVE.integrate_linearized(
        x, u, float(T), int(substeps), p.packed(), starts, kappas, phis, float(length), bool(closed))
    d = xn - a @ x - b @ u
    return LinearizedDynamics(a, b, d)


def wrap_state(x) -> np.ndarray:
    x = np.array(x, dtype=float)
    x[EPSI] = wrap_angle(x[EPSI])
    return x


def with_overrides(p: VehicleParams, **kw) -> VehicleParams:
    """Copy of ``p`` with fields replaced; derived stiffnesses recomputed unless given."""
    kw.setdefault("C_af", None if any(k in kw for k in ("m", "mu", "pacejka_front", "l_f", "l_r")) else p.C_af)
    kw.setdefault("C_ar", None if any(k in kw for k in ("m", "mu", "pacejka_rear", "l_f", "l_r")) else p.C_ar)
    return replace(p, **kw)
