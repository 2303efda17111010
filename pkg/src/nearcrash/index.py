"""Spatio-temporal candidate search over trajectory points.

Points are bucketed into fixed time slices and each slice gets a k-d tree
over earth-centred coordinates.  Chord length is monotone in great-circle
distance, so a tree radius query maps exactly onto the haversine threshold;
the exact distance and time predicates are re-applied afterwards.
"""
from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.spatial import cKDTree

from .geo import EARTH_RADIUS_M, chord_length, haversine_arrays, unit_vectors
from .ingest import PointTable, TrajectoryPoint

# Added to the radius so that points constructed at exactly the threshold
# survive round-off in the distance computation.
DISTANCE_EPS_M = 1e-6


class _Slice:
    __slots__ = ("rows", "tree")

    def __init__(self, rows: np.ndarray, xyz: np.ndarray):
        self.rows = rows
        self.tree = cKDTree(xyz[rows])


class SpatioTemporalIndex:
    """Immutable slice-bucketed k-d tree index over a :class:`PointTable`."""

    def __init__(self, points: PointTable, time_slice: float = 10.0, workers: int = 1):
        if time_slice <= 0:
            raise ValueError("time_slice must be positive")
        self.points = points
        self.time_slice = float(time_slice)
        self.lat = points.lat_rad
        self.lon = points.lon_rad
        self.xyz = unit_vectors(self.lat, self.lon) * EARTH_RADIUS_M
        self.jcode = _journey_codes(points.journey_id)
        keys = np.floor(points.t / self.time_slice).astype(np.int64)
        order = np.argsort(keys, kind="stable")
        uniq, starts = np.unique(keys[order], return_index=True)
        bounds = np.r_[starts, len(order)]
        groups = [(int(k), order[bounds[i]:bounds[i + 1]]) for i, k in enumerate(uniq)]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            built = list(pool.map(lambda g: _Slice(g[1], self.xyz), groups))
        self.slices: dict[int, _Slice] = {k: s for (k, _), s in zip(groups, built)}

    def __len__(self) -> int:
        return len(self.points)

    def _span(self, window: float) -> int:
        return max(1, math.ceil(window / self.time_slice))

    def _filter(self, i: np.ndarray, j: np.ndarray, radius: float, window: float):
        ok = (self.jcode[i] != self.jcode[j]) & (np.abs(self.points.t[i] - self.points.t[j]) <= window)
        i, j = i[ok], j[ok]
        d = haversine_arrays(self.lat[i], self.lon[i], self.lat[j], self.lon[j])
        ok = d <= radius + DISTANCE_EPS_M
        return i[ok], j[ok]

    def query_rows(self, row: int, radius: float = 100.0, window: float = 10.0) -> np.ndarray:
        """Row indices inside the buffer of indexed row ``row``."""
        return self._query(self.xyz[row], self.points.t[row], self.jcode[row], self.lat[row], self.lon[row],
                           radius, window)

    def _query(self, xyz, t, jcode, lat, lon, radius, window) -> np.ndarray:
        key = math.floor(t / self.time_slice)
        r = float(chord_length(radius + DISTANCE_EPS_M)) * (1 + 1e-9)
        found = []
        span = self._span(window)
        for k in range(key - span, key + span + 1):
            sl = self.slices.get(k)
            if sl is None:
                continue
            hits = sl.rows[sl.tree.query_ball_point(xyz, r)]
            found.append(hits)
        if not found:
            return np.empty(0, dtype=np.int64)
        rows = np.concatenate(found).astype(np.int64)
        ok = (self.jcode[rows] != jcode) & (np.abs(self.points.t[rows] - t) <= window)
        rows = rows[ok]
        d = haversine_arrays(lat, lon, self.lat[rows], self.lon[rows])
        return np.sort(rows[d <= radius + DISTANCE_EPS_M])


def _journey_codes(journey_ids: np.ndarray) -> np.ndarray:
    seen: dict = {}
    return np.fromiter((seen.setdefault(j, len(seen)) for j in journey_ids), dtype=np.int64, count=len(journey_ids))


def build_index(points: PointTable, time_slice: float = 10.0, workers: int = 1) -> SpatioTemporalIndex:
    return SpatioTemporalIndex(points, time_slice, workers)


def query_buffer(idx: SpatioTemporalIndex, anchor: TrajectoryPoint, radius: float = 100.0,
                 window: float = 10.0) -> list[TrajectoryPoint]:
    """Other journeys' points within ``radius`` meters and ``window`` seconds of ``anchor``."""
    if len(idx) == 0:
        return []
    xyz = unit_vectors(anchor.pos.lat, anchor.pos.lon)[0] * EARTH_RADIUS_M
    jcode = -1
    matches = np.flatnonzero(idx.points.journey_id == anchor.journey_id)
    if len(matches):
        jcode = idx.jcode[matches[0]]
    rows = idx._query(xyz, anchor.t, jcode, anchor.pos.lat, anchor.pos.lon, radius, window)
    return [idx.points[int(r)] for r in rows]


class PairFlagSet:
    """Set of unordered row pairs already emitted, sharded for concurrent use.

    :meth:`test_and_set_many` is atomic per shard, so concurrent workers never
    both claim the same pair.
    """

    def __init__(self, shards: int = 16):
        self._sets = [set() for _ in range(shards)]
        self._locks = [threading.Lock() for _ in range(shards)]

    def __len__(self) -> int:
        return sum(len(s) for s in self._sets)

    def __contains__(self, pair) -> bool:
        a, b = sorted(pair)
        key = (a, b)
        return key in self._sets[hash(key) % len(self._sets)]

    def test_and_set(self, a: int, b: int) -> bool:
        """Record the pair; True if it was not present before."""
        return bool(self.test_and_set_many(np.array([[a, b]]))[0])

    def test_and_set_many(self, pairs: np.ndarray) -> np.ndarray:
        pairs = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
        keys = list(map(tuple, pairs.tolist()))
        fresh = np.zeros(len(keys), dtype=bool)
        nshard = len(self._sets)
        by_shard: dict[int, list[int]] = {}
        for n, key in enumerate(keys):
            by_shard.setdefault(hash(key) % nshard, []).append(n)
        for shard, members in by_shard.items():
            with self._locks[shard]:
                target = self._sets[shard]
                for n in members:
                    if keys[n] not in target:
                        target.add(keys[n])
                        fresh[n] = True
        return fresh


def _slice_pairs(idx: SpatioTemporalIndex, key: int, radius: float, window: float, span: int):
    sl = idx.slices[key]
    r = float(chord_length(radius + DISTANCE_EPS_M)) * (1 + 1e-9)
    chunks = []
    local = sl.tree.query_pairs(r, output_type="ndarray")
    if len(local):
        chunks.append(np.column_stack((sl.rows[local[:, 0]], sl.rows[local[:, 1]])))
    for k in range(key + 1, key + span + 1):
        other = idx.slices.get(k)
        if other is None:
            continue
        m = sl.tree.sparse_distance_matrix(other.tree, r, output_type="ndarray")
        if len(m):
            chunks.append(np.column_stack((sl.rows[m["i"]], other.rows[m["j"]])))
    if not chunks:
        return np.empty((0, 2), dtype=np.int64)
    pairs = np.concatenate(chunks).astype(np.int64)
    i, j = idx._filter(pairs[:, 0], pairs[:, 1], radius, window)
    return np.column_stack((np.minimum(i, j), np.maximum(i, j)))


def emit_candidate_pairs(idx: SpatioTemporalIndex, flags: PairFlagSet | None = None, radius: float = 100.0,
                         window: float = 10.0, workers: int = 1) -> np.ndarray:
    """All unordered row pairs satisfying the buffer predicate, each once.

    Returns an ``(m, 2)`` array with ``row_a < row_b``, sorted
    lexicographically.  Pairs already recorded in ``flags`` are withheld and
    newly emitted ones are added to it.
    """
    if len(idx) == 0 or not idx.slices:
        return np.empty((0, 2), dtype=np.int64)
    span = idx._span(window)
    keys = sorted(idx.slices)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(lambda k: _slice_pairs(idx, k, radius, window, span), keys))
    pairs = np.concatenate(parts) if parts else np.empty((0, 2), dtype=np.int64)
    if len(pairs):
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    if flags is not None and len(pairs):
        pairs = pairs[flags.test_and_set_many(pairs)]
    return pairs


def candidate_point_pairs(idx: SpatioTemporalIndex, flags: PairFlagSet | None = None, **kw):
    """Stream form of :func:`emit_candidate_pairs` yielding point objects."""
    for a, b in emit_candidate_pairs(idx, flags, **kw):
        yield idx.points[int(a)], idx.points[int(b)]
