"""GeoLife-format ingestion: .plt trajectories, label files, trips and segments."""

from __future__ import annotations

import heapq
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import date
from enum import IntEnum
from typing import Iterable, Optional

log = logging.getLogger("modewise.ingest")

_EPOCH_ORDINAL = date(1970, 1, 1).toordinal()


class ModeLabel(IntEnum):
    WALK = 0
    BIKE = 1
    BUS = 2
    DRIVING = 3
    TRAIN = 4


# Raw GeoLife mode strings mapped to the five ground modes; car and taxi
# collapse to driving, all rail-based modes to train. Anything else (boat,
# airplane, run, motorcycle, ...) is excluded.
_MODE_MAP = {
    "walk": ModeLabel.WALK,
    "bike": ModeLabel.BIKE,
    "bus": ModeLabel.BUS,
    "car": ModeLabel.DRIVING,
    "taxi": ModeLabel.DRIVING,
    "train": ModeLabel.TRAIN,
    "subway": ModeLabel.TRAIN,
    "railway": ModeLabel.TRAIN,
}


@dataclass(frozen=True, slots=True)
class GpsPoint:
    """One GPS fix: latitude/longitude in degrees, t in epoch seconds (UTC)."""

    lat: float
    lon: float
    t: float


@dataclass(frozen=True, slots=True)
class LabelInterval:
    start: float
    end: float
    mode: Optional[ModeLabel]


@dataclass(slots=True)
class Trip:
    """A maximal run of labeled points with no time gap above the threshold."""

    points: list[tuple[GpsPoint, ModeLabel]]
    user_id: str = ""


@dataclass(slots=True)
class Segment:
    """A label-homogeneous run of points within one trip."""

    points: list[GpsPoint]
    mode: ModeLabel
    trip_ref: str = ""


def map_mode(raw: str) -> Optional[ModeLabel]:
    """Map a raw GeoLife mode string to a ModeLabel, or None if excluded."""
    return _MODE_MAP.get(raw.strip().lower())


def _epoch_from_ymd_hms(y: int, mo: int, d: int, h: int, mi: int, s: int) -> float:
    days = date(y, mo, d).toordinal() - _EPOCH_ORDINAL
    return days * 86400.0 + h * 3600 + mi * 60 + s


def parse_plt(text: str) -> list[GpsPoint]:
    """Parse a GeoLife .plt trajectory file into GPS points.

    The first six lines are header. Data lines are comma-separated:
    lat, lon, reserved, altitude(feet), days-serial, "YYYY-MM-DD", "HH:MM:SS".
    Malformed lines are skipped; the skip count is logged as a warning.
    """
    lines = text.splitlines()
    if len(lines) < 6:
        log.warning("plt file has %d lines, expected >= 6 header lines", len(lines))
        return []
    points: list[GpsPoint] = []
    skipped = 0
    for line in lines[6:]:
        line = line.strip()
        if not line:
            continue
        fields = line.split(",")
        if len(fields) < 7:
            skipped += 1
            continue
        try:
            lat = float(fields[0])
            lon = float(fields[1])
            ds = fields[5].split("-")
            ts = fields[6].split(":")
            t = _epoch_from_ymd_hms(int(ds[0]), int(ds[1]), int(ds[2]),
                                    int(ts[0]), int(ts[1]), int(ts[2]))
        except (ValueError, IndexError):
            skipped += 1
            continue
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0) or t < 0:
            skipped += 1
            continue
        points.append(GpsPoint(lat, lon, t))
    if skipped:
        log.warning("skipped %d malformed plt lines", skipped)
    return points


def _parse_label_time(s: str) -> float:
    # "2008/10/23 02:53:04"
    d, hms = s.strip().split(" ")
    y, mo, dd = d.split("/")
    h, mi, ss = hms.split(":")
    return _epoch_from_ymd_hms(int(y), int(mo), int(dd), int(h), int(mi), int(ss))


def parse_labels(text: str) -> list[LabelInterval]:
    """Parse a GeoLife labels.txt file into labeled time intervals.

    Intervals keep file order. Raw modes outside the five ground modes are
    retained with mode=None so their points can be excluded from matching.
    """
    intervals: list[LabelInterval] = []
    dropped = 0
    for i, line in enumerate(text.splitlines()):
        line = line.strip()
        if not line or i == 0:  # header: Start Time / End Time / Transportation Mode
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            dropped += 1
            continue
        try:
            start = _parse_label_time(parts[0])
            end = _parse_label_time(parts[1])
        except (ValueError, IndexError):
            dropped += 1
            continue
        if end < start:
            dropped += 1
            continue
        intervals.append(LabelInterval(start, end, map_mode(parts[2])))
    if dropped:
        log.warning("dropped %d malformed or inverted label lines", dropped)
    return intervals


def attach_labels(points: Iterable[GpsPoint],
                  intervals: list[LabelInterval]) -> list[tuple[GpsPoint, ModeLabel]]:
    """Assign each point the mode of the first file-order interval containing it.

    Interval bounds are inclusive. Points covered by no interval, or only by
    excluded-mode (None) intervals, are dropped. Points must be time-ordered.
    """
    labeled: list[tuple[GpsPoint, ModeLabel]] = []
    by_start = sorted(range(len(intervals)), key=lambda i: intervals[i].start)
    nxt = 0
    active: list[tuple[int, float, Optional[ModeLabel]]] = []  # (file order, end, mode)
    for p in points:
        while nxt < len(by_start) and intervals[by_start[nxt]].start <= p.t:
            iv = intervals[by_start[nxt]]
            heapq.heappush(active, (by_start[nxt], iv.end, iv.mode))
            nxt += 1
        while active and active[0][1] < p.t:
            heapq.heappop(active)
        if not active:
            continue
        mode = active[0][2]
        if mode is not None:
            labeled.append((p, mode))
    return labeled


def split_trips(labeled_points: list[tuple[GpsPoint, ModeLabel]],
                gap_s: float = 1200.0, user_id: str = "") -> list[Trip]:
    """Split a labeled point stream into trips at time gaps strictly above gap_s."""
    trips: list[Trip] = []
    current: list[tuple[GpsPoint, ModeLabel]] = []
    for pm in labeled_points:
        if current and pm[0].t - current[-1][0].t > gap_s:
            trips.append(Trip(current, user_id))
            current = []
        current.append(pm)
    if current:
        trips.append(Trip(current, user_id))
    return trips


def split_segments(trip: Trip) -> list[Segment]:
    """Split a trip into maximal label-homogeneous segments, in order."""
    segments: list[Segment] = []
    if not trip.points:
        return segments
    ref_base = f"{trip.user_id}@{trip.points[0][0].t:.0f}"
    run: list[GpsPoint] = []
    run_mode = trip.points[0][1]
    for p, mode in trip.points:
        if mode != run_mode:
            segments.append(Segment(run, run_mode, f"{ref_base}/{len(segments)}"))
            run = []
            run_mode = mode
        run.append(p)
    segments.append(Segment(run, run_mode, f"{ref_base}/{len(segments)}"))
    return segments


def merge_same_label(segments: list[Segment]) -> list[Segment]:
    """Concatenate adjacent segments that carry the same label.

    Needed after filtering deletes whole segments and leaves identical
    neighbors touching.
    """
    merged: list[Segment] = []
    for seg in segments:
        if merged and merged[-1].mode == seg.mode:
            merged[-1] = Segment(merged[-1].points + seg.points,
                                 seg.mode, merged[-1].trip_ref)
        else:
            merged.append(seg)
    return merged


# --- trips JSON-lines interchange -----------------------------------------

def trip_to_json(trip: Trip) -> str:
    pts = [[p.lat, p.lon, p.t, int(m)] for p, m in trip.points]
    return json.dumps({"user": trip.user_id, "points": pts})


def trip_from_json(line: str) -> Trip:
    obj = json.loads(line)
    pts = [(GpsPoint(lat, lon, t), ModeLabel(mode))
           for lat, lon, t, mode in obj["points"]]
    return Trip(pts, obj.get("user", ""))


def write_trips_jsonl(trips: Iterable[Trip], path: str) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for trip in trips:
            f.write(trip_to_json(trip))
            f.write("\n")
            n += 1
    return n


def read_trips_jsonl(path: str) -> list[Trip]:
    trips = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                trips.append(trip_from_json(line))
    return trips


# --- directory walking ------------------------------------------------------

def ingest_user(user_dir: str, gap_s: float = 1200.0) -> list[Trip]:
    """Process one GeoLife user directory into labeled trips.

    Users without a labels.txt contribute nothing (no labeled points).
    """
    user_id = os.path.basename(os.path.normpath(user_dir))
    labels_path = os.path.join(user_dir, "labels.txt")
    if not os.path.isfile(labels_path):
        return []
    with open(labels_path, "r", encoding="utf-8", errors="replace") as f:
        intervals = parse_labels(f.read())
    if not intervals:
        return []
    traj_dir = os.path.join(user_dir, "Trajectory")
    points: list[GpsPoint] = []
    if os.path.isdir(traj_dir):
        for name in sorted(os.listdir(traj_dir)):
            if not name.lower().endswith(".plt"):
                continue
            with open(os.path.join(traj_dir, name), "r",
                      encoding="utf-8", errors="replace") as f:
                points.extend(parse_plt(f.read()))
    points.sort(key=lambda p: p.t)
    labeled = attach_labels(points, intervals)
    return split_trips(labeled, gap_s, user_id)


def ingest_directory(geolife_dir: str, gap_s: float = 1200.0,
                     jobs: int = 1) -> list[Trip]:
    """Walk a GeoLife `Data/<user>/` layout and return all labeled trips.

    Deterministic: users are processed in sorted order regardless of jobs.
    """
    data_dir = os.path.join(geolife_dir, "Data")
    if not os.path.isdir(data_dir):
        data_dir = geolife_dir
    user_dirs = sorted(
        os.path.join(data_dir, d) for d in os.listdir(data_dir)
        if os.path.isdir(os.path.join(data_dir, d))
    )
    trips: list[Trip] = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for user_trips in pool.map(ingest_user, user_dirs):
                trips.extend(user_trips)
    else:
        for d in user_dirs:
            trips.extend(ingest_user(d))
    return trips
