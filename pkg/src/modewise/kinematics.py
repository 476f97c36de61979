"""Per-point motion channels: speed, acceleration, jerk, bearing rate.

Distances come from Vincenty's inverse geodesic on the WGS-84 ellipsoid,
iterated to convergence with a haversine fallback for the near-antipodal
pairs where the iteration stalls. The solver is vectorized so a whole
segment's consecutive distances are computed in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ingest import GpsPoint


@dataclass(frozen=True)
class GeodesicConfig:
    """Ellipsoid constants and iteration limits, exposed in one place."""

    a: float = 6378137.0                 # WGS-84 semi-major axis, meters
    f: float = 1 / 298.257223563         # WGS-84 flattening
    tol: float = 1e-12                   # lambda convergence, radians
    max_iter: int = 200
    fallback_radius: float = 6371008.8   # mean Earth radius for haversine

    @property
    def b(self) -> float:
        return self.a * (1 - self.f)


GEODESIC = GeodesicConfig()


@dataclass
class KinematicSeries:
    """Four per-point channels, all length N; undefined trailing entries are 0."""

    speed: np.ndarray
    accel: np.ndarray
    jerk: np.ndarray
    bearing_rate: np.ndarray
    fallback_count: int = 0

    def __len__(self) -> int:
        return len(self.speed)


def _haversine(lat1, lon1, lat2, lon2, radius):
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2 * radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def vincenty_arrays(lat1, lon1, lat2, lon2,
                    cfg: GeodesicConfig = GEODESIC):
    """Inverse geodesic distance for arrays of radian coordinates.

    Returns (distances_m, fallback_mask). Lanes that fail to converge within
    cfg.max_iter (near-antipodal pairs) fall back to the haversine distance.
    """
    lat1 = np.atleast_1d(np.asarray(lat1, dtype=np.float64))
    lon1 = np.atleast_1d(np.asarray(lon1, dtype=np.float64))
    lat2 = np.atleast_1d(np.asarray(lat2, dtype=np.float64))
    lon2 = np.atleast_1d(np.asarray(lon2, dtype=np.float64))
    if not (np.all(np.isfinite(lat1)) and np.all(np.isfinite(lon1))
            and np.all(np.isfinite(lat2)) and np.all(np.isfinite(lon2))):
        raise ValueError("non-finite coordinates")

    # Canonicalize endpoint order so d(a,b) and d(b,a) run bit-identical
    # arithmetic; the distance is symmetric by definition.
    swap = (lat2 < lat1) | ((lat2 == lat1) & (lon2 < lon1))
    lat1, lat2 = np.where(swap, lat2, lat1), np.where(swap, lat1, lat2)
    lon1, lon2 = np.where(swap, lon2, lon1), np.where(swap, lon1, lon2)

    f, b = cfg.f, cfg.b
    u1 = np.arctan((1 - f) * np.tan(lat1))
    u2 = np.arctan((1 - f) * np.tan(lat2))
    sin_u1, cos_u1 = np.sin(u1), np.cos(u1)
    sin_u2, cos_u2 = np.sin(u2), np.cos(u2)
    # shortest-arc longitude difference
    ell = np.remainder(lon2 - lon1 + np.pi, 2 * np.pi) - np.pi

    lam = ell.copy()
    converged = np.zeros(lam.shape, dtype=bool)

    with np.errstate(divide="ignore", invalid="ignore"):
        for _ in range(cfg.max_iter):
            sin_lam, cos_lam = np.sin(lam), np.cos(lam)
            sin_sigma = np.sqrt((cos_u2 * sin_lam) ** 2
                                + (cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lam) ** 2)
            cos_sigma = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_lam
            sigma = np.arctan2(sin_sigma, cos_sigma)
            sin_alpha = np.where(sin_sigma == 0.0, 0.0,
                                 cos_u1 * cos_u2 * sin_lam / sin_sigma)
            cos_sq_alpha = 1.0 - sin_alpha ** 2
            # both points on the equator: cos^2(alpha) = 0
            cos2sm = np.where(cos_sq_alpha == 0.0, 0.0,
                              cos_sigma - 2.0 * sin_u1 * sin_u2 / cos_sq_alpha)
            c = f / 16.0 * cos_sq_alpha * (4.0 + f * (4.0 - 3.0 * cos_sq_alpha))
            lam_new = ell + (1.0 - c) * f * sin_alpha * (
                sigma + c * sin_sigma * (
                    cos2sm + c * cos_sigma * (-1.0 + 2.0 * cos2sm ** 2)))
            # freeze lanes at their own convergence: results for one pair do
            # not depend on which other pairs share the batch
            active = ~converged
            converged |= active & (np.abs(lam_new - lam) < cfg.tol)
            lam = np.where(active, lam_new, lam)
            if converged.all():
                break

        # recompute the sigma quantities from the final lambda
        sin_lam, cos_lam = np.sin(lam), np.cos(lam)
        sin_sigma = np.sqrt((cos_u2 * sin_lam) ** 2
                            + (cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lam) ** 2)
        cos_sigma = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_lam
        sigma = np.arctan2(sin_sigma, cos_sigma)
        sin_alpha = np.where(sin_sigma == 0.0, 0.0,
                             cos_u1 * cos_u2 * sin_lam / sin_sigma)
        cos_sq_alpha = 1.0 - sin_alpha ** 2
        cos2sm = np.where(cos_sq_alpha == 0.0, 0.0,
                          cos_sigma - 2.0 * sin_u1 * sin_u2 / cos_sq_alpha)

        usq = cos_sq_alpha * (cfg.a ** 2 - b ** 2) / b ** 2
        big_a = 1.0 + usq / 16384.0 * (4096.0 + usq * (-768.0 + usq * (320.0 - 175.0 * usq)))
        big_b = usq / 1024.0 * (256.0 + usq * (-128.0 + usq * (74.0 - 47.0 * usq)))
        dsig = big_b * sin_sigma * (
            cos2sm + big_b / 4.0 * (
                cos_sigma * (-1.0 + 2.0 * cos2sm ** 2)
                - big_b / 6.0 * cos2sm
                * (-3.0 + 4.0 * sin_sigma ** 2) * (-3.0 + 4.0 * cos2sm ** 2)))
        dist = b * big_a * (sigma - dsig)

    fallback = ~converged
    if fallback.any():
        dist = np.where(fallback,
                        _haversine(lat1, lon1, lat2, lon2, cfg.fallback_radius),
                        dist)
    return dist, fallback


def vincenty_inverse(p1: GpsPoint, p2: GpsPoint,
                     cfg: GeodesicConfig = GEODESIC) -> float:
    """WGS-84 inverse geodesic distance between two points, in meters."""
    d, _ = vincenty_arrays(math.radians(p1.lat), math.radians(p1.lon),
                           math.radians(p2.lat), math.radians(p2.lon), cfg)
    return float(d[0])


def vincenty_inverse_flagged(p1: GpsPoint, p2: GpsPoint,
                             cfg: GeodesicConfig = GEODESIC) -> tuple[float, bool]:
    """Like vincenty_inverse but also reports whether the fallback fired."""
    d, fb = vincenty_arrays(math.radians(p1.lat), math.radians(p1.lon),
                            math.radians(p2.lat), math.radians(p2.lon), cfg)
    return float(d[0]), bool(fb[0])


def speed(p1: GpsPoint, p2: GpsPoint) -> float:
    """Distance over elapsed time for two consecutive points, m/s."""
    dt = p2.t - p1.t
    if dt <= 0:
        raise ValueError(f"non-increasing timestamps: {p1.t} -> {p2.t}")
    return vincenty_inverse(p1, p2) / dt


def acceleration(s1: float, s2: float, dt: float) -> float:
    """Speed change rate, m/s^2; sign preserved (deceleration negative)."""
    if dt <= 0:
        raise ValueError(f"non-positive dt: {dt}")
    return (s2 - s1) / dt


def jerk(a1: float, a2: float, dt: float) -> float:
    """Acceleration change rate, m/s^3."""
    if dt <= 0:
        raise ValueError(f"non-positive dt: {dt}")
    return (a2 - a1) / dt


def bearing_arrays(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Forward azimuth in degrees [0, 360) for arrays of radian coordinates."""
    dlon = lon2 - lon1
    y = np.sin(dlon) * np.cos(lat2)
    x = np.cos(lat1) * np.sin(lat2) - np.sin(lat1) * np.cos(lat2) * np.cos(dlon)
    deg = np.degrees(np.arctan2(y, x))
    deg = np.remainder(deg, 360.0)
    # remainder of a tiny negative rounds to exactly 360.0
    return np.where(deg == 360.0, 0.0, deg)


def bearing(p1: GpsPoint, p2: GpsPoint) -> float:
    """Compass angle of the line p1->p2 from true north, degrees in [0, 360).

    Coincident points give 0 by convention.
    """
    if not all(map(math.isfinite, (p1.lat, p1.lon, p2.lat, p2.lon))):
        raise ValueError("non-finite coordinates")
    if p1.lat == p2.lat and p1.lon == p2.lon:
        return 0.0
    return float(bearing_arrays(math.radians(p1.lat), math.radians(p1.lon),
                                math.radians(p2.lat), math.radians(p2.lon)))


def bearing_rate(b1: float, b2: float, wrap: bool = False) -> float:
    """Absolute bearing difference in degrees.

    The default is the literal |b2 - b1| with no wraparound; wrap=True folds
    the difference into [0, 180] for sensitivity studies.
    """
    d = abs(b2 - b1)
    if wrap:
        d = d % 360.0
        d = min(d, 360.0 - d)
    return d


def compute_series(points: list[GpsPoint], wrap_bearing: bool = False,
                   cfg: GeodesicConfig = GEODESIC) -> KinematicSeries:
    """Compute all four channels for a point sequence.

    Requires N >= 2 strictly increasing timestamps. speed[i] is defined for
    i < N-1, accel[i] for i < N-2, jerk[i] for i < N-3, bearing_rate[i] for
    i < N-2; everything past its defining range is exactly 0.
    """
    n = len(points)
    if n < 2:
        raise ValueError(f"need at least 2 points, got {n}")
    lat = np.radians(np.array([p.lat for p in points]))
    lon = np.radians(np.array([p.lon for p in points]))
    t = np.array([p.t for p in points], dtype=np.float64)
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise ValueError("timestamps must be strictly increasing")

    dist, fb = vincenty_arrays(lat[:-1], lon[:-1], lat[1:], lon[1:], cfg)
    spd = np.zeros(n)
    spd[:-1] = dist / dt

    acc = np.zeros(n)
    if n >= 3:
        acc[: n - 2] = np.diff(spd[: n - 1]) / dt[: n - 2]

    jrk = np.zeros(n)
    if n >= 4:
        jrk[: n - 3] = np.diff(acc[: n - 2]) / dt[: n - 3]

    br = np.zeros(n)
    if n >= 3:
        brg = bearing_arrays(lat[:-1], lon[:-1], lat[1:], lon[1:])
        coincident = (lat[:-1] == lat[1:]) & (lon[:-1] == lon[1:])
        brg[coincident] = 0.0
        d = np.abs(np.diff(brg))
        if wrap_bearing:
            d = np.remainder(d, 360.0)
            d = np.minimum(d, 360.0 - d)
        br[: n - 2] = d

    return KinematicSeries(spd, acc, jrk, br, fallback_count=int(fb.sum()))
