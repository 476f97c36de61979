"""Synthetic labeled GPS tracks with mode-distinctive kinematics.

Each track integrates a heading/speed random walk into lat/lon on a local
flat-earth approximation. Profile bands sit strictly inside the kinematic
caps so clean tracks pass the outlier filter untouched; noise mode displaces
chosen points so that exactly one inter-point speed breaks the cap while the
neighboring pair stays legal, exercising the filter deterministically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ingest import GpsPoint, ModeLabel, Trip
from .pipeline import TABLE_THRESHOLDS

M_PER_DEG_LAT = 111132.0


@dataclass(frozen=True)
class ModeProfile:
    mode: ModeLabel
    speed_lo: float
    speed_hi: float
    dv_max: float            # per-step speed change bound, m/s
    turn_sigma_deg: float
    stop_period: Optional[int] = None  # steps between periodic stop starts
    stop_dwell: int = 0
    dt: float = 1.0
    # per-track smoothness spread: dv and turn sigma are drawn per track from
    # [lo_frac, 1] * the nominal value, so a class spans calm and agitated
    # tracks (a highway drive is nearly as smooth as a train)
    dv_frac_lo: float = 1.0
    turn_frac_lo: float = 0.6


# cruise bands chosen to be separable yet overlapping at the edges; these are
# test fixtures, all strictly inside the per-mode caps
DEFAULT_PROFILES = {
    ModeLabel.WALK: ModeProfile(ModeLabel.WALK, 0.5, 2.0, 0.25, 40.0),
    ModeLabel.BIKE: ModeProfile(ModeLabel.BIKE, 2.0, 6.0, 0.5, 15.0),
    ModeLabel.BUS: ModeProfile(ModeLabel.BUS, 3.0, 15.0, 1.2, 4.0,
                               stop_period=45, stop_dwell=5),
    ModeLabel.DRIVING: ModeProfile(ModeLabel.DRIVING, 5.0, 25.0, 3.0, 8.0,
                                   dv_frac_lo=0.15, turn_frac_lo=0.25),
    ModeLabel.TRAIN: ModeProfile(ModeLabel.TRAIN, 10.0, 30.0, 0.8, 0.4,
                                 dv_frac_lo=0.4),
}


@dataclass
class TrackInfo:
    user_id: str
    mode: ModeLabel
    n_points: int
    n_spiked: int

    def expected_chunks(self, m: int = 200, min_pts: int = 10) -> int:
        # the filter removes exactly the spiked points
        n = self.n_points - self.n_spiked
        full, rem = divmod(n, m)
        return full + (1 if rem >= min_pts else 0)


@dataclass
class GenSummary:
    tracks: list[TrackInfo] = field(default_factory=list)

    def expected_samples(self, m: int = 200, min_pts: int = 10) -> int:
        return sum(t.expected_chunks(m, min_pts) for t in self.tracks)


def _speed_walk(rng: np.random.Generator, profile: ModeProfile,
                n_steps: int, dv: float) -> np.ndarray:
    """Mean-reverting speed sequence with per-step change <= dv."""
    lo, hi = profile.speed_lo, profile.speed_hi
    center = rng.uniform(lo, hi)
    stopping = np.zeros(n_steps, dtype=bool)
    if profile.stop_period:
        phase = int(rng.integers(0, profile.stop_period))
        ramp = int(math.ceil(hi / dv))
        cycle = np.arange(n_steps) + phase
        pos = cycle % profile.stop_period
        stopping = pos < (profile.stop_dwell + ramp)
    v = np.empty(n_steps)
    cur = center
    for i in range(n_steps):
        if stopping[i]:
            cur = max(0.0, cur - dv)
        else:
            step = rng.normal(0.0, dv / 2) + 0.15 * (center - cur)
            cur = float(np.clip(cur + np.clip(step, -dv, dv), min(lo, cur + dv), hi))
            cur = min(cur, hi)
        v[i] = cur
    return v


def _integrate(rng: np.random.Generator, profile: ModeProfile,
               n_points: int, t0: float) -> list[GpsPoint]:
    n_steps = n_points - 1
    dv = profile.dv_max * rng.uniform(profile.dv_frac_lo, 1.0)
    speeds = _speed_walk(rng, profile, n_steps, dv)
    turn_sigma = profile.turn_sigma_deg * rng.uniform(profile.turn_frac_lo, 1.4)
    headings = np.cumsum(np.concatenate(
        [[rng.uniform(0, 360)], rng.normal(0, turn_sigma, n_steps - 1)]))
    lat = rng.uniform(35.0, 45.0)
    lon = rng.uniform(100.0, 120.0)
    pts = [GpsPoint(lat, lon, t0)]
    for i in range(n_steps):
        step_m = speeds[i] * profile.dt
        theta = math.radians(headings[i])
        dy = step_m * math.cos(theta)
        dx = step_m * math.sin(theta)
        lat += dy / M_PER_DEG_LAT
        lon += dx / (M_PER_DEG_LAT * math.cos(math.radians(lat)))
        pts.append(GpsPoint(lat, lon, t0 + (i + 1) * profile.dt))
    return pts


def _local_meters(origin: GpsPoint, p: GpsPoint) -> np.ndarray:
    scale_lon = M_PER_DEG_LAT * math.cos(math.radians(origin.lat))
    return np.array([(p.lon - origin.lon) * scale_lon,
                     (p.lat - origin.lat) * M_PER_DEG_LAT])


def _inject_spike(pts: list[GpsPoint], idx: int, cap: float,
                  dt: float) -> bool:
    """Displace pts[idx] so speed into it breaks the cap and speed out stays
    legal. Returns False when the local geometry cannot support that."""
    prev_p, spike_p, next_p = pts[idx - 1], pts[idx], pts[idx + 1]
    c = _local_meters(prev_p, next_p)
    gap = float(np.linalg.norm(c))
    rho = min(0.95 * cap * dt, max(1.06 * cap * dt - gap, 0.15 * cap * dt))
    if gap + rho < 1.05 * cap * dt:
        return False
    u = c / gap
    target = c + rho * u  # beyond next_p on the prev->next axis
    scale_lon = M_PER_DEG_LAT * math.cos(math.radians(prev_p.lat))
    pts[idx] = GpsPoint(prev_p.lat + target[1] / M_PER_DEG_LAT,
                        prev_p.lon + target[0] / scale_lon,
                        spike_p.t)
    return True


def generate(n_per_mode: int, points_per_track: int, seed: int = 0,
             noise: bool = False, n_spikes: int = 1,
             profiles: dict[ModeLabel, ModeProfile] = DEFAULT_PROFILES,
             ) -> tuple[list[Trip], GenSummary]:
    """Build n_per_mode tracks per mode; one Trip per track.

    Per-track RNG streams are spawned from the master seed in a fixed
    (mode, index) order, so generation is reproducible and parallel-safe.
    """
    if points_per_track < 4:
        raise ValueError("tracks need at least 4 points")
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(profiles) * n_per_mode)
    trips: list[Trip] = []
    summary = GenSummary()
    ci = 0
    for mode in sorted(profiles):
        profile = profiles[mode]
        cap_speed = TABLE_THRESHOLDS.max_speed[int(mode)]
        for i in range(n_per_mode):
            rng = np.random.Generator(np.random.PCG64(children[ci]))
            ci += 1
            t0 = 1_200_000_000.0 + ci * 1_000_000.0
            pts = _integrate(rng, profile, points_per_track, t0)
            spiked = 0
            if noise:
                candidates = list(rng.permutation(
                    np.arange(2, points_per_track - 2)))
                used: set[int] = set()
                for idx in candidates:
                    if spiked >= n_spikes:
                        break
                    if any(abs(idx - u) < 3 for u in used):
                        continue
                    if _inject_spike(pts, int(idx), cap_speed, profile.dt):
                        used.add(int(idx))
                        spiked += 1
            user = f"synth-{mode.name.lower()}-{i:04d}"
            trips.append(Trip([(p, mode) for p in pts], user))
            summary.tracks.append(TrackInfo(user, mode, points_per_track, spiked))
    return trips, summary
