"""Heading-based conflict detection on candidate point pairs.

For each pair the two recorded courses are intersected on the sphere; the
travel time of each vehicle to the crossing gives the time to conflict,
which must fall under a threshold while the two arrival times agree within
a synchrony window.
"""
from __future__ import annotations

import csv
import enum
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace

import numpy as np

from .geo import GeoPoint, haversine_arrays, haversine_distance, intersect_radials, intersect_radials_arrays
from .ingest import Ignition, PointTable, TrajectoryPoint, format_time, _parse_time

EVENT_COLUMNS = (
    "event_id", "journey_a", "journey_b", "t_a", "t_b", "lat_a", "lon_a", "lat_b", "lon_b",
    "conflict_lat", "conflict_lon", "ttc_s", "t13_s", "t23_s", "pair_distance_m", "direction_class",
    "segment_id",
    # anchor detail needed to re-run matching and reporting from the file alone
    "point_a", "point_b", "speed_a_ms", "speed_b_ms", "heading_a", "heading_b", "ignition_a", "ignition_b",
)


class DirectionClass(str, enum.Enum):
    SAME = "SameDirection"
    CROSSING = "Crossing"


@dataclass(frozen=True)
class DetectParams:
    ttc_threshold: float = 3.0
    sync_window: float = 1.5
    min_speed: float = 0.5
    same_direction_deg: float = 30.0
    coalesce_gap: float = 10.0


@dataclass(frozen=True)
class ConflictGeometry:
    conflict_point: GeoPoint
    d13: float
    d23: float


@dataclass(frozen=True)
class NearCrashEvent:
    journey_a: str
    journey_b: str
    p_a: TrajectoryPoint
    p_b: TrajectoryPoint
    conflict_point: GeoPoint
    ttc: float
    t13: float
    t23: float
    pair_distance: float
    event_time: float
    direction_class: DirectionClass
    matched_segment: str | None = None
    event_id: str | None = None

    def sort_key(self):
        return (self.event_time, self.journey_a, self.journey_b, self.p_a.point_id, self.p_b.point_id)


def heading_difference(h1, h2):
    """Smallest absolute angle between two headings, degrees in [0, 180]."""
    d = np.abs(np.asarray(h1, dtype=float) - np.asarray(h2, dtype=float)) % 360.0
    return np.minimum(d, 360.0 - d)


def direction_class(h1: float, h2: float, same_direction_deg: float = 30.0) -> DirectionClass:
    if heading_difference(h1, h2) <= same_direction_deg:
        return DirectionClass.SAME
    return DirectionClass.CROSSING


def conflict_geometry(p_a: TrajectoryPoint, p_b: TrajectoryPoint) -> ConflictGeometry | None:
    hit = intersect_radials(p_a.pos, p_a.heading, p_b.pos, p_b.heading)
    if hit is None:
        return None
    return ConflictGeometry(hit.point, hit.d13, hit.d23)


def time_to_conflict(g: ConflictGeometry, v_a: float, v_b: float, sync_window: float = 1.5,
                     min_speed: float = 0.5) -> float | None:
    """``min(t13, t23)`` when both arrivals agree within ``sync_window``.

    Near-stationary vehicles (speed below ``min_speed``) have no defined TTC
    and yield ``None``, as does a synchrony failure.
    """
    if v_a < min_speed or v_b < min_speed:
        return None
    t13 = g.d13 / v_a
    t23 = g.d23 / v_b
    if abs(t13 - t23) > sync_window:
        return None
    return min(t13, t23)


def _canonical(p_a: TrajectoryPoint, p_b: TrajectoryPoint):
    if (p_b.journey_id, p_b.point_id) < (p_a.journey_id, p_a.point_id):
        return p_b, p_a
    return p_a, p_b


def screen_pair(p_a: TrajectoryPoint, p_b: TrajectoryPoint, ttc_threshold: float = 3.0,
                params: DetectParams | None = None) -> NearCrashEvent | None:
    params = params or DetectParams(ttc_threshold=ttc_threshold)
    p_a, p_b = _canonical(p_a, p_b)
    g = conflict_geometry(p_a, p_b)
    if g is None:
        return None
    ttc = time_to_conflict(g, p_a.speed, p_b.speed, params.sync_window, params.min_speed)
    if ttc is None or ttc > params.ttc_threshold:
        return None
    return NearCrashEvent(
        journey_a=p_a.journey_id,
        journey_b=p_b.journey_id,
        p_a=p_a,
        p_b=p_b,
        conflict_point=g.conflict_point,
        ttc=ttc,
        t13=g.d13 / p_a.speed,
        t23=g.d23 / p_b.speed,
        pair_distance=haversine_distance(p_a.pos, p_b.pos),
        event_time=min(p_a.t, p_b.t),
        direction_class=direction_class(p_a.heading, p_b.heading, params.same_direction_deg),
    )


def screen_pairs(points: PointTable, pairs: np.ndarray, params: DetectParams | None = None) -> list[NearCrashEvent]:
    """Vectorized :func:`screen_pair` over row pairs of ``points``."""
    params = params or DetectParams()
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return []
    a, b = pairs[:, 0], pairs[:, 1]
    ja, jb = points.journey_id[a], points.journey_id[b]
    swap = (jb < ja) | ((jb == ja) & (points.point_id[b] < points.point_id[a]))
    a, b = np.where(swap, b, a), np.where(swap, a, b)

    va, vb = points.speed[a], points.speed[b]
    moving = (va >= params.min_speed) & (vb >= params.min_speed)
    a, b, va, vb = a[moving], b[moving], va[moving], vb[moving]
    lat, lon = points.lat_rad, points.lon_rad
    lat3, lon3, d13, d23, ok = intersect_radials_arrays(
        lat[a], lon[a], points.heading[a], lat[b], lon[b], points.heading[b])
    with np.errstate(invalid="ignore"):
        t13 = d13 / va
        t23 = d23 / vb
        ttc = np.minimum(t13, t23)
        hit = ok & (np.abs(t13 - t23) <= params.sync_window) & (ttc <= params.ttc_threshold)
    (sel,) = np.nonzero(hit)
    dist = haversine_arrays(lat[a[sel]], lon[a[sel]], lat[b[sel]], lon[b[sel]])
    events = []
    for n, k in enumerate(sel):
        pa, pb = points[int(a[k])], points[int(b[k])]
        events.append(NearCrashEvent(
            journey_a=pa.journey_id,
            journey_b=pb.journey_id,
            p_a=pa,
            p_b=pb,
            conflict_point=GeoPoint(float(lat3[k]), float(lon3[k])),
            ttc=float(ttc[k]),
            t13=float(t13[k]),
            t23=float(t23[k]),
            pair_distance=float(dist[n]),
            event_time=min(pa.t, pb.t),
            direction_class=direction_class(pa.heading, pb.heading, params.same_direction_deg),
        ))
    events.sort(key=NearCrashEvent.sort_key)
    return events


def coalesce_events(raw: Iterable[NearCrashEvent], gap: float = 10.0) -> list[NearCrashEvent]:
    """Merge successive detections of one journey pair into single events.

    Detections of the same unordered pair no more than ``gap`` seconds after
    the previous one join its run; each run is represented by its minimum-TTC
    detection (earliest on ties).
    """
    by_pair: dict[tuple[str, str], list[NearCrashEvent]] = {}
    for ev in raw:
        by_pair.setdefault(tuple(sorted((ev.journey_a, ev.journey_b))), []).append(ev)
    out = []
    for pair in sorted(by_pair):
        run: list[NearCrashEvent] = []
        for ev in sorted(by_pair[pair], key=NearCrashEvent.sort_key):
            if run and ev.event_time - run[-1].event_time > gap:
                out.append(min(run, key=lambda e: (e.ttc, e.sort_key())))
                run = []
            run.append(ev)
        if run:
            out.append(min(run, key=lambda e: (e.ttc, e.sort_key())))
    out.sort(key=NearCrashEvent.sort_key)
    return out


def number_events(events: Sequence[NearCrashEvent]) -> list[NearCrashEvent]:
    return [replace(ev, event_id=f"E{n:07d}") for n, ev in enumerate(events, start=1)]


# -- file formats -----------------------------------------------------------

def _fmt(x: float, nd: int) -> str:
    s = f"{x:.{nd}f}"
    return "0" + s[2:] if s.startswith("-0") and float(s) == 0 else s


def write_events_csv(events: Sequence[NearCrashEvent], stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(EVENT_COLUMNS)
    for ev in events:
        pa, pb = ev.p_a, ev.p_b
        w.writerow((
            ev.event_id or "", ev.journey_a, ev.journey_b, format_time(pa.t), format_time(pb.t),
            _fmt(pa.pos.lat_deg, 7), _fmt(pa.pos.lon_deg, 7), _fmt(pb.pos.lat_deg, 7), _fmt(pb.pos.lon_deg, 7),
            _fmt(ev.conflict_point.lat_deg, 7), _fmt(ev.conflict_point.lon_deg, 7),
            _fmt(ev.ttc, 4), _fmt(ev.t13, 4), _fmt(ev.t23, 4), _fmt(ev.pair_distance, 3),
            ev.direction_class.value, ev.matched_segment or "",
            pa.point_id, pb.point_id, _fmt(pa.speed, 4), _fmt(pb.speed, 4),
            _fmt(pa.heading, 2), _fmt(pb.heading, 2), pa.ignition.label, pb.ignition.label,
        ))


def read_events_csv(stream) -> list[NearCrashEvent]:
    events = []
    for row in csv.DictReader(stream):
        def point(side):
            return TrajectoryPoint(
                point_id=row[f"point_{side}"],
                journey_id=row[f"journey_{side}"],
                t=_parse_time(row[f"t_{side}"]),
                pos=GeoPoint.from_degrees(float(row[f"lat_{side}"]), float(row[f"lon_{side}"])),
                speed=float(row[f"speed_{side}_ms"]),
                heading=float(row[f"heading_{side}"]) % 360.0,
                ignition=Ignition.parse(row[f"ignition_{side}"]),
            )
        pa, pb = point("a"), point("b")
        events.append(NearCrashEvent(
            journey_a=pa.journey_id,
            journey_b=pb.journey_id,
            p_a=pa,
            p_b=pb,
            conflict_point=GeoPoint.from_degrees(float(row["conflict_lat"]), float(row["conflict_lon"])),
            ttc=float(row["ttc_s"]),
            t13=float(row["t13_s"]),
            t23=float(row["t23_s"]),
            pair_distance=float(row["pair_distance_m"]),
            event_time=min(pa.t, pb.t),
            direction_class=DirectionClass(row["direction_class"]),
            matched_segment=row["segment_id"] or None,
            event_id=row["event_id"] or None,
        ))
    return events


def events_geojson(events: Sequence[NearCrashEvent]) -> dict:
    feats = []
    for ev in events:
        feats.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [round(ev.conflict_point.lon_deg, 7),
                                                          round(ev.conflict_point.lat_deg, 7)]},
            "properties": {
                "event_id": ev.event_id,
                "journey_a": ev.journey_a,
                "journey_b": ev.journey_b,
                "ttc_s": round(ev.ttc, 4),
                "pair_distance_m": round(ev.pair_distance, 3),
                "direction_class": ev.direction_class.value,
                "segment_id": ev.matched_segment,
            },
        })
    return {"type": "FeatureCollection", "features": feats}


def write_events_geojson(events: Sequence[NearCrashEvent], stream) -> None:
    json.dump(events_geojson(events), stream, sort_keys=True, separators=(",", ":"))
    stream.write("\n")
