"""Hand-crafted trajectory features and the classical baselines (KNN, tree).

Features per segment: length, mean speed (distance over duration),
expectation of speed (mean of point speeds), speed variance, top three
speeds, top three accelerations, heading change rate, stop rate, and
velocity change rate. The three event rates are counts per kilometer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .ingest import GpsPoint
from .kinematics import bearing_arrays, vincenty_arrays
from .pipeline import ChannelStack, Dataset

log = logging.getLogger("modewise.baselines")

FEATURE_NAMES = [
    "length_m", "mean_speed", "expectation_speed", "var_speed",
    "top1_speed", "top2_speed", "top3_speed",
    "top1_accel", "top2_accel", "top3_accel",
    "heading_change_rate", "stop_rate", "velocity_change_rate",
]


@dataclass(frozen=True)
class FeatureConfig:
    """Event thresholds for the rate features; rates are per kilometer."""

    heading_change_deg: float = 19.0
    stop_speed_ms: float = 3.4
    velocity_change_frac: float = 0.26


DEFAULT_FEATURES = FeatureConfig()


@dataclass
class HandcraftedFeatures:
    vector: np.ndarray
    degenerate: bool = False  # zero-distance segment: rates forced to 0

    def __getitem__(self, i):
        return self.vector[i]


def _top3(values: np.ndarray) -> list[float]:
    top = sorted(values, reverse=True)[:3]
    return list(top) + [0.0] * (3 - len(top))


def _assemble(dists, dt, speeds, accels, brs,
              cfg: FeatureConfig) -> HandcraftedFeatures:
    length = float(dists.sum())
    duration = float(dt.sum())
    km = length / 1000.0
    degenerate = km <= 0.0
    if degenerate:
        hcr = sr = vcr = 0.0
        log.warning("zero-distance segment: rate features set to 0")
    else:
        hcr = float((brs > cfg.heading_change_deg).sum()) / km
        sr = float((speeds < cfg.stop_speed_ms).sum()) / km
        ds = np.abs(np.diff(speeds))
        prev = speeds[:-1]
        moving = prev > 0
        vcr = float((ds[moving] / prev[moving] > cfg.velocity_change_frac).sum()) / km
    vec = np.array([
        length,
        length / duration if duration > 0 else 0.0,
        float(speeds.mean()),
        float(speeds.var()),
        *_top3(speeds),
        *_top3(accels),
        hcr, sr, vcr,
    ])
    return HandcraftedFeatures(vec, degenerate)


def extract_handcrafted(points: Sequence[GpsPoint],
                        cfg: FeatureConfig = DEFAULT_FEATURES) -> HandcraftedFeatures:
    """Feature vector for a cleaned point segment (needs >= 4 points)."""
    n = len(points)
    if n < 4:
        raise ValueError(f"need at least 4 points, got {n}")
    lat = np.radians(np.array([p.lat for p in points]))
    lon = np.radians(np.array([p.lon for p in points]))
    t = np.array([p.t for p in points])
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise ValueError("timestamps must be strictly increasing")
    dists, _ = vincenty_arrays(lat[:-1], lon[:-1], lat[1:], lon[1:])
    speeds = dists / dt
    accels = np.diff(speeds) / dt[:-1]
    bearings = bearing_arrays(lat[:-1], lon[:-1], lat[1:], lon[1:])
    brs = np.abs(np.diff(bearings))
    return _assemble(dists, dt, speeds, accels, brs, cfg)


def stack_features(stack: ChannelStack,
                   cfg: FeatureConfig = DEFAULT_FEATURES) -> HandcraftedFeatures:
    """Feature vector from a channel-stack sample's valid region.

    Point spacing is not stored in samples, so one tick is taken as one
    second: distance becomes the speed-channel sum and mean speed coincides
    with the expectation of speed. A global time-scale factor would cancel
    in z-scoring anyway.
    """
    v = stack.valid_len
    speeds = stack.data[0, :v].astype(np.float64)
    accels = stack.data[1, :v].astype(np.float64)
    brs = stack.data[3, :v].astype(np.float64)
    dt = np.ones(v)
    return _assemble(speeds * 1.0, dt, speeds, accels, brs, cfg)


def dataset_features(dataset: Dataset,
                     cfg: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    """(N, 13) feature matrix over all samples."""
    return np.stack([stack_features(s, cfg).vector for s in dataset.samples])


class Standardizer:
    """Per-feature z-scoring with train statistics; zero spread maps to 1."""

    def fit(self, x: np.ndarray) -> "Standardizer":
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)
        return self

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


class KnnClassifier:
    """Euclidean k-NN with majority vote; vote ties take the smallest label."""

    def __init__(self, k: int = 5):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k

    def fit(self, x: np.ndarray, y: np.ndarray) -> "KnnClassifier":
        if self.k > len(x):
            raise ValueError(f"k={self.k} exceeds {len(x)} training samples")
        self.scaler = Standardizer().fit(x)
        self.x = self.scaler.transform(x)
        self.y = np.asarray(y)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        q = self.scaler.transform(np.atleast_2d(x))
        out = np.empty(len(q), dtype=np.int64)
        for i, row in enumerate(q):
            d2 = ((self.x - row) ** 2).sum(axis=1)
            nearest = np.argsort(d2, kind="stable")[:self.k]
            votes = np.bincount(self.y[nearest], minlength=5)
            out[i] = int(votes.argmax())  # first max = smallest label
        return out


@dataclass
class _Node:
    feature: int = -1
    threshold: float = 0.0
    left: Optional["_Node"] = None
    right: Optional["_Node"] = None
    label: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _gini_best_split(x: np.ndarray, y: np.ndarray,
                     n_classes: int) -> Optional[tuple[int, float, float]]:
    """Best (feature, threshold, weighted_gini) over all axis-aligned splits.

    Deterministic: features scanned in order, thresholds ascending, strict
    improvement keeps the earlier candidate.
    """
    n = len(y)
    best = None
    onehot = np.eye(n_classes)[y]
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        v = x[order, f]
        cum = np.cumsum(onehot[order], axis=0)  # class counts in the left part
        cut = np.nonzero(v[:-1] < v[1:])[0]     # split between i and i+1
        if cut.size == 0:
            continue
        n_left = cut + 1.0
        n_right = n - n_left
        left_counts = cum[cut]
        right_counts = cum[-1] - left_counts
        gini_left = 1.0 - ((left_counts / n_left[:, None]) ** 2).sum(axis=1)
        gini_right = 1.0 - ((right_counts / n_right[:, None]) ** 2).sum(axis=1)
        weighted = (n_left * gini_left + n_right * gini_right) / n
        i = int(weighted.argmin())  # first min = smallest threshold
        if best is None or weighted[i] < best[2]:
            thr = (v[cut[i]] + v[cut[i] + 1]) / 2.0
            best = (f, float(thr), float(weighted[i]))
    return best


def _majority(y: np.ndarray) -> int:
    return int(np.bincount(y, minlength=5).argmax())


class DecisionTree:
    """Binary CART on Gini impurity with axis-aligned splits."""

    def __init__(self, max_depth: int = 10):
        if max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        self.max_depth = max_depth

    def fit(self, x: np.ndarray, y: np.ndarray) -> "DecisionTree":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.n_classes = 5
        self.root = self._grow(x, y, depth=0)
        return self

    def _grow(self, x, y, depth) -> _Node:
        node = _Node(label=_majority(y))
        if depth >= self.max_depth or len(np.unique(y)) == 1 or len(y) < 2:
            return node
        counts = np.bincount(y, minlength=self.n_classes)
        parent_gini = 1.0 - ((counts / len(y)) ** 2).sum()
        split = _gini_best_split(x, y, self.n_classes)
        if split is None or split[2] >= parent_gini:
            return node
        f, thr, _ = split
        mask = x[:, f] <= thr
        node.feature = f
        node.threshold = thr
        node.left = self._grow(x[mask], y[mask], depth + 1)
        node.right = self._grow(x[~mask], y[~mask], depth + 1)
        return node

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(len(x), dtype=np.int64)
        for i, row in enumerate(x):
            node = self.root
            while not node.is_leaf:
                node = node.left if row[node.feature] <= node.threshold else node.right
            out[i] = node.label
        return out


def tune_baseline(algo: str, x: np.ndarray, y: np.ndarray,
                  grid: Sequence[int], k_folds: int = 5,
                  seed: int = 0) -> tuple[int, dict[int, float]]:
    """k-fold CV over one hyperparameter; ties take the smaller value."""
    from .train_eval import cv_folds

    folds = cv_folds(len(x), k_folds, seed)
    table: dict[int, float] = {}
    for hp in grid:
        accs = []
        for fold in folds:
            mask = np.ones(len(x), dtype=bool)
            mask[fold] = False
            if algo == "knn":
                if hp > mask.sum():
                    continue
                clf = KnnClassifier(k=hp).fit(x[mask], y[mask])
            elif algo == "dt":
                clf = DecisionTree(max_depth=hp).fit(x[mask], y[mask])
            else:
                raise ValueError(f"unknown baseline {algo!r}")
            accs.append(float((clf.predict(x[fold]) == y[fold]).mean()))
        if accs:
            table[hp] = float(np.mean(accs))
    best = max(sorted(table), key=lambda h: table[h])
    return best, table
