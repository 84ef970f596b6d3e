"""Closed or open circuits described by piecewise-constant curvature.

A track is a list of segments (straight, constant-radius arc, or chicane).
Chicanes are expanded internally into two equal-length arcs of opposite
curvature, so every lookup works on a flat table of *pieces*. Lookups use
half-open intervals: a query exactly at a piece boundary returns the piece
that begins there.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationFailed, InvalidTrack, LateralOutOfRange

SEGMENT_KINDS = ("straight", "arc", "chicane")


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class TrackSegment:
    kind: str
    length: float
    curvature: float = 0.0
    w_l: float | None = None
    w_r: float | None = None
    inclination: float = 0.0

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise InvalidTrack(f"unknown segment kind {self.kind!r}")
        if not self.length > 0:
            raise InvalidTrack("segment length must be positive")
        if self.kind == "straight" and self.curvature != 0.0:
            raise InvalidTrack("straight segments have zero curvature")


@dataclass(frozen=True)
class CartesianPose:
    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class FrenetPoint:
    s: float
    e_y: float
    e_psi: float


class Track:
    """Immutable track geometry.

    Parameters
    ----------
    segments:
        Ordered segments. Per-segment ``w_l``/``w_r`` override the defaults.
    w_l, w_r:
        Default left (positive) and right (negative) half-widths in meters.
    closed:
        Whether ``s`` wraps modulo the total length.
    """

    def __init__(self, segments, w_l: float = 1.5, w_r: float = -1.5, closed: bool = True):
        self.segments = tuple(segments)
        if not self.segments:
            raise InvalidTrack("track needs at least one segment")
        self.w_l = float(w_l)
        self.w_r = float(w_r)
        self.closed = bool(closed)

        starts, lengths, kappas, wls, wrs, phis = [], [], [], [], [], []
        s = 0.0
        for seg in self.segments:
            wl = self.w_l if seg.w_l is None else float(seg.w_l)
            wr = self.w_r if seg.w_r is None else float(seg.w_r)
            if seg.kind == "chicane":
                half = 0.5 * seg.length
                parts = [(half, seg.curvature), (half, -seg.curvature)]
            else:
                parts = [(seg.length, seg.curvature)]
            for length, kappa in parts:
                starts.append(s)
                lengths.append(length)
                kappas.append(kappa)
                wls.append(wl)
                wrs.append(wr)
                phis.append(seg.inclination)
                s += length
        self.length = s
        self.piece_start = np.array(starts)
        self.piece_length = np.array(lengths)
        self.piece_kappa = np.array(kappas)
        self.piece_wl = np.array(wls)
        self.piece_wr = np.array(wrs)
        self.piece_phi = np.array(phis)

        # start pose of every piece, integrated in closed form
        n = len(starts)
        x0 = np.zeros(n + 1)
        y0 = np.zeros(n + 1)
        h0 = np.zeros(n + 1)
        for i in range(n):
            k, ell, h = kappas[i], lengths[i], h0[i]
            if k == 0.0:
                x0[i + 1] = x0[i] + ell * math.cos(h)
                y0[i + 1] = y0[i] + ell * math.sin(h)
            else:
                h1 = h + k * ell
                x0[i + 1] = x0[i] + (math.sin(h1) - math.sin(h)) / k
                y0[i + 1] = y0[i] - (math.cos(h1) - math.cos(h)) / k
            h0[i + 1] = h + k * ell
        self.piece_x0 = x0[:-1]
        self.piece_y0 = y0[:-1]
        self.piece_h0 = h0[:-1]
        self.end_pose = (x0[-1], y0[-1], h0[-1])
        self.total_heading = h0[-1]
        self.check_invariants()

    # ------------------------------------------------------------------ lookups
    def wrap_s(self, s):
        s = np.asarray(s, dtype=float)
        if self.closed:
            out = np.mod(s, self.length)
            out = np.where(out >= self.length, 0.0, out)
        else:
            out = s
        return float(out) if out.ndim == 0 else out

    def _index(self, s):
        s = self.wrap_s(s)
        idx = np.searchsorted(self.piece_start, s, side="right") - 1
        return np.clip(idx, 0, len(self.piece_start) - 1), s

    def curvature_at(self, s):
        idx, _ = self._index(s)
        out = self.piece_kappa[idx]
        return float(out) if np.ndim(out) == 0 else out

    def width_at(self, s):
        idx, _ = self._index(s)
        wl, wr = self.piece_wl[idx], self.piece_wr[idx]
        if np.ndim(wl) == 0:
            return float(wl), float(wr)
        return wl, wr

    def inclination_at(self, s):
        idx, _ = self._index(s)
        out = self.piece_phi[idx]
        return float(out) if np.ndim(out) == 0 else out

    def lookup_arrays(self):
        """Flat arrays consumed by the compiled kernels."""
        return (self.piece_start, self.piece_kappa, self.piece_phi, self.length, self.closed)

    # -------------------------------------------------------------- geometry
    def centerline_pose(self, s: float) -> CartesianPose:
        idx, sw = self._index(s)
        idx = int(idx)
        t = float(sw) - self.piece_start[idx]
        k = self.piece_kappa[idx]
        x0, y0, h0 = self.piece_x0[idx], self.piece_y0[idx], self.piece_h0[idx]
        h = h0 + k * t
        if k == 0.0:
            x, y = x0 + t * math.cos(h0), y0 + t * math.sin(h0)
        else:
            x = x0 + (math.sin(h) - math.sin(h0)) / k
            y = y0 - (math.cos(h) - math.cos(h0)) / k
        return CartesianPose(x, y, h)

    def frenet_to_cartesian(self, s: float, e_y: float, e_psi: float = 0.0) -> CartesianPose:
        k = self.curvature_at(s)
        if k != 0.0 and abs(e_y) >= 1.0 / abs(k):
            raise LateralOutOfRange(f"|e_y|={abs(e_y):.3f} beyond turning radius {1 / abs(k):.3f}")
        c = self.centerline_pose(s)
        x = c.x - e_y * math.sin(c.heading)
        y = c.y + e_y * math.cos(c.heading)
        return CartesianPose(x, y, wrap_angle(c.heading + e_psi))

    def cartesian_to_frenet(self, x: float, y: float, heading: float = 0.0) -> FrenetPoint:
        """Project a pose onto the nearest point of the centerline."""
        best = None
        for i in range(len(self.piece_start)):
            k = self.piece_kappa[i]
            ell = self.piece_length[i]
            x0, y0, h0 = self.piece_x0[i], self.piece_y0[i], self.piece_h0[i]
            if k == 0.0:
                c, sn = math.cos(h0), math.sin(h0)
                t = (x - x0) * c + (y - y0) * sn
                t = min(max(t, 0.0), ell)
            else:
                cx, cy = x0 - math.sin(h0) / k, y0 + math.cos(h0) / k
                theta = math.atan2(y - cy, x - cx)
                h = theta + math.copysign(math.pi / 2, k)
                mid = k * ell / 2
                dh = wrap_angle(h - h0 - mid) + mid
                t = min(max(dh / k, 0.0), ell)
            hp = h0 + k * t
            if k == 0.0:
                px, py = x0 + t * math.cos(h0), y0 + t * math.sin(h0)
            else:
                px = x0 + (math.sin(hp) - math.sin(h0)) / k
                py = y0 - (math.cos(hp) - math.cos(h0)) / k
            e_y = -(x - px) * math.sin(hp) + (y - py) * math.cos(hp)
            dist = math.hypot(x - px, y - py)
            if best is None or dist < best[0] - 1e-12:
                best = (dist, self.piece_start[i] + t, e_y, wrap_angle(heading - hp))
        s = best[1]
        if self.closed and s >= self.length:
            s -= self.length
        return FrenetPoint(s, best[2], best[3])

    def sample_centerline(self, ds: float = 0.5) -> np.ndarray:
        s = np.arange(0.0, self.length, ds)
        pts = [self.centerline_pose(si) for si in s]
        return np.array([[p.x, p.y, p.heading] for p in pts])

    # ------------------------------------------------------------ invariants
    def check_invariants(self, heading_tol: float = 1e-6, closure_tol: float = 1e-6) -> None:
        if np.any(self.piece_wl <= 0) or np.any(self.piece_wr >= 0):
            raise InvalidTrack("need w_l > 0 > w_r everywhere")
        half = np.maximum(self.piece_wl, -self.piece_wr)
        if np.any(np.abs(self.piece_kappa) * half >= 1.0):
            raise InvalidTrack("curvature too large for the track width")
        if self.closed:
            turns = self.total_heading / (2 * math.pi)
            if abs(turns - round(turns)) > heading_tol:
                raise InvalidTrack("closed track heading is not a multiple of 2*pi")
            if math.hypot(self.end_pose[0], self.end_pose[1]) > closure_tol:
                raise InvalidTrack("closed track endpoints do not coincide")

    # ---------------------------------------------------------- serialization
    def to_dict(self) -> dict:
        segs = []
        for seg in self.segments:
            d = {"kind": seg.kind, "length": seg.length, "curvature": seg.curvature}
            if seg.w_l is not None:
                d["w_l"] = seg.w_l
            if seg.w_r is not None:
                d["w_r"] = seg.w_r
            if seg.inclination:
                d["inclination"] = seg.inclination
            segs.append(d)
        return {"segments": segs, "w_l": self.w_l, "w_r": self.w_r, "closed": self.closed}

    @classmethod
    def from_dict(cls, d: dict) -> "Track":
        segs = [
            TrackSegment(
                kind=s["kind"],
                length=float(s["length"]),
                curvature=float(s.get("curvature", 0.0)),
                w_l=s.get("w_l"),
                w_r=s.get("w_r"),
                inclination=float(s.get("inclination", 0.0)),
            )
            for s in d["segments"]
        ]
        return cls(segs, w_l=d.get("w_l", 1.5), w_r=d.get("w_r", -1.5), closed=d.get("closed", True))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Track":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "Track":
        return cls.from_json(Path(path).read_text())


# ----------------------------------------------------------------- generation
@dataclass(frozen=True)
class TrackGenSpec:
    """Ranges for :func:`random_track`. Lengths in m, curvatures in 1/m."""

    n_segments: int = 8
    straight_length: tuple = (3.0, 8.0)
    arc_length: tuple = (2.0, 6.0)
    chicane_length: tuple = (3.0, 6.0)
    curvature: tuple = (0.2, 0.6)
    kind_weights: tuple = (0.4, 0.4, 0.2)
    w_l: float = 0.7
    w_r: float = -0.7
    closed: bool = False
    lead_in: float = 4.0
    max_retries: int = 25
    clearance: float = 0.5
    extra: dict = field(default_factory=dict)


def _dubins_closure(x, y, h, radius):
    """Shortest CSC path from pose (x, y, h) back to the origin pose (0, 0, 0).

    Returns a list of (length, curvature) pieces, or None.
    """
    best = None
    for t1, t2 in (("L", "L"), ("R", "R"), ("L", "R"), ("R", "L")):
        s1 = 1.0 if t1 == "L" else -1.0
        s2 = 1.0 if t2 == "L" else -1.0
        c1 = np.array([x - s1 * radius * math.sin(h), y + s1 * radius * math.cos(h)])
        c2 = np.array([0.0, s2 * radius])
        d = c2 - c1
        dist = float(np.hypot(*d))
        if s1 == s2:
            if dist < 1e-12:
                continue
            psi = math.atan2(d[1], d[0])
            straight = dist
        else:
            if dist < 2 * radius:
                continue
            straight = math.sqrt(dist**2 - 4 * radius**2)
            psi = math.atan2(d[1], d[0]) + s1 * math.atan2(2 * radius, straight)
        a1 = (s1 * (psi - h)) % (2 * math.pi)
        a2 = (s2 * (0.0 - psi)) % (2 * math.pi)
        total = radius * (a1 + a2) + straight
        if best is None or total < best[0]:
            best = (total, [(radius * a1, s1 / radius), (straight, 0.0), (radius * a2, s2 / radius)])
    return None if best is None else best[1]


def _self_clearance_ok(track: Track, spec: TrackGenSpec) -> bool:
    ds = 0.5
    pts = track.sample_centerline(ds)[:, :2]
    n = len(pts)
    gap = 2.0 * max(spec.w_l, -spec.w_r) + spec.clearance
    skip = int(math.ceil(math.pi * gap / ds))
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    idx = np.arange(n)
    sep = np.abs(idx[:, None] - idx[None, :])
    if track.closed:
        sep = np.minimum(sep, n - sep)
    mask = sep > skip
    return not np.any(dist[mask] < gap)


def random_track(seed: int, spec: TrackGenSpec | None = None) -> Track:
    """Seeded random track built from straight, arc and chicane stretches.

    Closed tracks are completed with an arc-straight-arc closing path of the
    tightest allowed radius. Candidate layouts that violate the curvature bound
    or come too close to themselves are redrawn up to ``spec.max_retries``
    times before :class:`GenerationFailed` is raised.
    """
    spec = spec or TrackGenSpec()
    rng = np.random.default_rng(seed)
    k_lo, k_hi = spec.curvature
    half = max(spec.w_l, -spec.w_r)
    for _ in range(spec.max_retries + 1):
        segs = []
        if spec.lead_in > 0:
            segs.append(TrackSegment("straight", spec.lead_in))
        weights = np.asarray(spec.kind_weights, dtype=float)
        if k_hi <= 0.0:
            weights = np.array([1.0, 0.0, 0.0])
        weights = weights / weights.sum()
        for _ in range(spec.n_segments):
            kind = SEGMENT_KINDS[rng.choice(3, p=weights)]
            if kind == "straight":
                segs.append(TrackSegment("straight", float(rng.uniform(*spec.straight_length))))
            else:
                mag = float(rng.uniform(k_lo, k_hi))
                sign = 1.0 if rng.random() < 0.5 else -1.0
                rng_len = spec.arc_length if kind == "arc" else spec.chicane_length
                segs.append(TrackSegment(kind, float(rng.uniform(*rng_len)), sign * mag))
        try:
            if spec.closed:
                probe = Track(segs, spec.w_l, spec.w_r, closed=False)
                x, y, h = probe.end_pose
                radius = max(1.0 / k_hi if k_hi > 0 else 0.0, 1.1 * half)
                pieces = _dubins_closure(x, y, h, radius)
                if pieces is None:
                    continue
                for length, kappa in pieces:
                    if length > 1e-9:
                        kind = "straight" if kappa == 0.0 else "arc"
                        segs.append(TrackSegment(kind, length, kappa))
                track = Track(segs, spec.w_l, spec.w_r, closed=True)
            else:
                track = Track(segs, spec.w_l, spec.w_r, closed=False)
        except InvalidTrack:
            continue
        if _self_clearance_ok(track, spec):
            return track
    raise GenerationFailed(f"no valid track after {spec.max_retries} retries (seed={seed})")


def stadium_track(w_l: float = 5.0, w_r: float = -5.0) -> Track:
    """Fixed 200 m closed circuit with two chicanes and two hairpins."""
    k_hairpin = math.pi / 50.0
    segs = [
        TrackSegment("straight", 15.0),
        TrackSegment("chicane", 20.0, 0.04),
        TrackSegment("straight", 15.0),
        TrackSegment("arc", 50.0, k_hairpin),
        TrackSegment("straight", 15.0),
        TrackSegment("chicane", 20.0, 0.04),
        TrackSegment("straight", 15.0),
        TrackSegment("arc", 50.0, k_hairpin),
    ]
    return Track(segs, w_l=w_l, w_r=w_r, closed=True)
