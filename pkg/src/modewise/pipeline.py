"""Segment cleaning, channel smoothing, fixed-length chunking, dataset I/O.

Processing order per trip: split into label-homogeneous segments, drop
time-disordered points, remove speed/acceleration outliers to a fixpoint,
drop short segments, re-merge identical-label neighbors, compute the four
channels over each full segment, smooth, then chunk to length M.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional

import numpy as np

from .ingest import GpsPoint, Segment, Trip, merge_same_label, split_segments
from .kinematics import compute_series, vincenty_arrays

log = logging.getLogger("modewise.pipeline")


class PipelineError(Exception):
    pass


@dataclass(frozen=True)
class Thresholds:
    """Per-mode kinematic caps: (walk, bike, bus, driving, train)."""

    max_speed: tuple[float, ...] = (7.0, 12.0, 34.0, 50.0, 34.0)
    max_accel: tuple[float, ...] = (3.0, 3.0, 2.0, 10.0, 3.0)

    def for_mode(self, mode: int) -> tuple[float, float]:
        return self.max_speed[mode], self.max_accel[mode]


TABLE_THRESHOLDS = Thresholds()

# caps for unlabeled tracks at inference time: the loosest per-mode values
GLOBAL_MAX_SPEED = 50.0
GLOBAL_MAX_ACCEL = 10.0

CHANNELS = 4  # speed, accel, jerk, bearing rate


@dataclass(frozen=True)
class PipelineConfig:
    segment_len: int = 200          # M
    min_points: int = 10
    sg_window: int = 9
    sg_order: int = 3
    wrap_bearing: bool = False
    thresholds: Thresholds = TABLE_THRESHOLDS


@dataclass
class ChannelStack:
    """One training sample: a (4, M) float32 block plus its label.

    Entries at index >= valid_len are zero padding in every channel.
    """

    data: np.ndarray
    label: int
    valid_len: int

    def __eq__(self, other):
        return (isinstance(other, ChannelStack)
                and self.label == other.label
                and self.valid_len == other.valid_len
                and np.array_equal(self.data, other.data))


@dataclass
class Dataset:
    samples: list[ChannelStack]
    M: int
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def stacked(self, dtype=np.float64) -> np.ndarray:
        """All samples as one (N, 4, M) array."""
        return np.stack([s.data for s in self.samples]).astype(dtype)

    def class_counts(self) -> dict[int, int]:
        labels = self.labels()
        return {int(m): int((labels == m).sum()) for m in range(5)}


def drop_time_disorder(points: list[GpsPoint]) -> list[GpsPoint]:
    """Keep a strictly-increasing-time subsequence, scanning in order.

    A point whose timestamp is <= the last survivor's is dropped; this also
    removes duplicate timestamps that would give division by zero.
    """
    out: list[GpsPoint] = []
    for p in points:
        if out and p.t <= out[-1].t:
            continue
        out.append(p)
    return out


def _speeds(points: list[GpsPoint]) -> tuple[np.ndarray, np.ndarray]:
    lat = np.radians(np.array([p.lat for p in points]))
    lon = np.radians(np.array([p.lon for p in points]))
    dt = np.diff(np.array([p.t for p in points]))
    dist, _ = vincenty_arrays(lat[:-1], lon[:-1], lat[1:], lon[1:])
    return dist / dt, dt


def filter_kinematic_outliers(segment: Segment,
                              thresholds: Thresholds = TABLE_THRESHOLDS,
                              max_speed: Optional[float] = None,
                              max_accel: Optional[float] = None) -> Segment:
    """Remove points with unrealistic speed or acceleration, to a fixpoint.

    A pair faster than the mode's speed cap blames the arriving point (the
    newly recorded fix); an over-cap acceleration at index i blames the point
    whose arrival produced the offending speed change. One point is removed
    per sweep and everything is recomputed, so cascades created by a removal
    are caught on the next pass. Timestamps must be strictly increasing.
    """
    if max_speed is None or max_accel is None:
        ms, ma = thresholds.for_mode(int(segment.mode))
        max_speed = ms if max_speed is None else max_speed
        max_accel = ma if max_accel is None else max_accel
    pts = list(segment.points)
    while len(pts) >= 2:
        spd, dt = _speeds(pts)
        over = np.nonzero(spd > max_speed)[0]
        if over.size:
            del pts[over[0] + 1]
            continue
        if len(pts) >= 3:
            acc = np.diff(spd) / dt[:-1]
            over = np.nonzero(np.abs(acc) > max_accel)[0]
            if over.size:
                del pts[over[0] + 2]
                continue
        break
    return Segment(pts, segment.mode, segment.trip_ref)


def drop_short(segments: Iterable[Segment], min_pts: int = 10) -> list[Segment]:
    """Keep only segments with at least min_pts points."""
    return [s for s in segments if len(s.points) >= min_pts]


@lru_cache(maxsize=32)
def _savgol_coeff_rows(window: int, order: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Center evaluation rows for a full window and for truncated left edges.

    Row k of the edge list evaluates the least-squares polynomial over
    indices [0, k+h] at position k. Right-edge rows are the mirrors.
    """
    h = window // 2

    def eval_row(rel_positions: np.ndarray) -> np.ndarray:
        a = np.vander(rel_positions.astype(np.float64), order + 1, increasing=True)
        return np.linalg.pinv(a)[0]

    center = eval_row(np.arange(-h, h + 1))
    left = [eval_row(np.arange(-k, h + 1)) for k in range(h)]
    return center, left


def savgol_smooth(series: np.ndarray, window: int = 9, order: int = 3) -> np.ndarray:
    """Least-squares polynomial smoothing with truncated one-sided edge fits.

    Each output value is the fitted polynomial of the given order over the
    window centered at that index, evaluated at the index. Near the edges the
    window is truncated to what exists. Output length equals input length;
    series shorter than order + 2 are returned unchanged.
    """
    if window % 2 != 1:
        raise ValueError(f"window must be odd, got {window}")
    if order >= window:
        raise ValueError(f"order {order} must be < window {window}")
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    if n < order + 2:
        return x.copy()
    h = window // 2
    if n < window:
        # every window is truncated; fit each index directly
        out = np.empty(n)
        for i in range(n):
            lo, hi = max(0, i - h), min(n, i + h + 1)
            rel = np.arange(lo, hi) - i
            a = np.vander(rel.astype(np.float64), order + 1, increasing=True)
            out[i] = np.linalg.pinv(a)[0] @ x[lo:hi]
        return out
    center, left = _savgol_coeff_rows(window, order)
    out = np.empty(n)
    out[h: n - h] = np.correlate(x, center, mode="valid")
    for k in range(h):
        out[k] = left[k] @ x[: k + h + 1]
        out[n - 1 - k] = left[k][::-1] @ x[n - 1 - k - h:]
    return out


def chunk_segment(channels: np.ndarray, label: int, M: int = 200,
                  min_pts: int = 10) -> list[ChannelStack]:
    """Split full-segment channels (4, N) into consecutive length-M samples.

    The final short chunk is zero-padded when it has at least min_pts real
    points, otherwise discarded.
    """
    n = channels.shape[1]
    out: list[ChannelStack] = []
    for start in range(0, n, M):
        part = channels[:, start:start + M]
        valid = part.shape[1]
        if valid < M:
            if valid < min_pts:
                break
            padded = np.zeros((channels.shape[0], M), dtype=np.float32)
            padded[:, :valid] = part
            part = padded
        out.append(ChannelStack(np.ascontiguousarray(part, dtype=np.float32),
                                int(label), valid))
    return out


def segment_channels(segment: Segment, config: PipelineConfig) -> np.ndarray:
    """Compute and smooth the four channels over one full segment."""
    ks = compute_series(segment.points, wrap_bearing=config.wrap_bearing)
    rows = [ks.speed, ks.accel, ks.jerk, ks.bearing_rate]
    return np.stack([savgol_smooth(r, config.sg_window, config.sg_order)
                     for r in rows])


def clean_trip_segments(trip: Trip, config: PipelineConfig) -> list[Segment]:
    """All cleaning stages for one trip, returning ready-to-chunk segments."""
    segs = split_segments(trip)
    segs = [replace_points(s, drop_time_disorder(s.points)) for s in segs]
    segs = [filter_kinematic_outliers(s, config.thresholds) for s in segs]
    segs = drop_short(segs, config.min_points)
    # deleting whole segments can leave identical labels adjacent; merging
    # can in turn create an over-cap boundary pair, so filter once more
    segs = merge_same_label(segs)
    segs = [filter_kinematic_outliers(s, config.thresholds) for s in segs]
    return drop_short(segs, config.min_points)


def replace_points(segment: Segment, points: list[GpsPoint]) -> Segment:
    return Segment(points, segment.mode, segment.trip_ref)


def trip_samples(trip: Trip, config: PipelineConfig) -> list[ChannelStack]:
    samples: list[ChannelStack] = []
    for seg in clean_trip_segments(trip, config):
        channels = segment_channels(seg, config)
        samples.extend(chunk_segment(channels, int(seg.mode),
                                     config.segment_len, config.min_points))
    return samples


def build_dataset(trips: Iterable[Trip],
                  config: PipelineConfig = PipelineConfig(),
                  jobs: int = 1,
                  provenance: str = "") -> Dataset:
    """Run the full cleaning/feature/chunk pipeline over all trips.

    Deterministic: samples are pooled in (trip order, chunk order) no matter
    how many workers process trips.
    """
    trips = list(trips)
    samples: list[ChannelStack] = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        from functools import partial
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for chunk in pool.map(partial(trip_samples, config=config), trips,
                                  chunksize=8):
                samples.extend(chunk)
    else:
        for trip in trips:
            samples.extend(trip_samples(trip, config))
    if not samples:
        raise PipelineError("no usable segments")
    return Dataset(samples, config.segment_len, provenance)


def split_train_test(dataset: Dataset, frac: float = 0.8,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded uniform random split at the sample level; disjoint, exhaustive."""
    if not dataset.samples:
        raise PipelineError("cannot split an empty dataset")
    n = len(dataset.samples)
    n_train = int(round(n * frac))
    perm = np.random.default_rng(seed).permutation(n)
    train = [dataset.samples[i] for i in perm[:n_train]]
    test = [dataset.samples[i] for i in perm[n_train:]]
    return (Dataset(train, dataset.M, dataset.provenance + "/train"),
            Dataset(test, dataset.M, dataset.provenance + "/test"))


# --- TMSG dataset file format -----------------------------------------------
#
# magic "TMSG", u32 version=1, u32 n_samples, u32 channels=4, u32 M, then per
# sample: u8 label, u32 valid_len, channels*M little-endian f32 channel-major.

TMSG_MAGIC = b"TMSG"
TMSG_VERSION = 1


def write_tmsg(dataset: Dataset, path: str) -> None:
    with open(path, "wb") as f:
        f.write(TMSG_MAGIC)
        f.write(struct.pack("<III I", TMSG_VERSION, len(dataset.samples),
                            CHANNELS, dataset.M))
        for s in dataset.samples:
            if s.data.shape != (CHANNELS, dataset.M):
                raise PipelineError(
                    f"sample shape {s.data.shape} != ({CHANNELS}, {dataset.M})")
            f.write(struct.pack("<BI", s.label, s.valid_len))
            f.write(np.ascontiguousarray(s.data, dtype="<f4").tobytes())


def read_tmsg(path: str) -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TMSG_MAGIC:
            raise PipelineError(f"{path}: bad magic {magic!r}, expected TMSG")
        version, n_samples, channels, m = struct.unpack("<IIII", f.read(16))
        if version != TMSG_VERSION:
            raise PipelineError(f"{path}: unsupported TMSG version {version}")
        if channels != CHANNELS:
            raise PipelineError(f"{path}: expected {CHANNELS} channels, got {channels}")
        samples = []
        block = channels * m * 4
        for _ in range(n_samples):
            head = f.read(5)
            if len(head) != 5:
                raise PipelineError(f"{path}: truncated sample header")
            label, valid_len = struct.unpack("<BI", head)
            raw = f.read(block)
            if len(raw) != block:
                raise PipelineError(f"{path}: truncated sample data")
            data = np.frombuffer(raw, dtype="<f4").reshape(channels, m).copy()
            samples.append(ChannelStack(data, label, valid_len))
    return Dataset(samples, m, provenance=path)
