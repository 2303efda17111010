"""Road-network loading, nearest-segment matching and per-segment risk ratios."""
from __future__ import annotations

import csv
import enum
import json
import math
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .detect import DirectionClass, NearCrashEvent, heading_difference
from .geo import EARTH_RADIUS_M, GeoPoint, bearing_arrays, chord_length, unit_vectors
from .ingest import PointTable

# Sub-edges longer than this are split for indexing; splitting stays on the
# same great circle so distances are unaffected.
_MAX_INDEX_EDGE_M = 200.0
_TIE_EPS_M = 1e-6


class RoadCategory(str, enum.Enum):
    PA = "PA"
    SH = "SH"
    IH = "IH"
    SL = "SL"
    US = "US"
    FM = "FM"
    SS = "SS"
    CR = "CR"
    LS = "LS"
    RD = "RD"


class MalformedFeature(ValueError):
    pass


class DuplicateSegmentId(ValueError):
    pass


SHOULDER_CODES = frozenset({0, 1, 2, 3, 4, 5, 6, 99})
SURFACE_CODES = frozenset(range(1, 14)) | {99}
PARKING_CODES = frozenset({1, 2, 3})
OBSTACLE_CODES = frozenset(range(8))


@dataclass(frozen=True)
class AttributeRecord:
    """Road inventory attributes; names follow the inventory columns, snake-cased."""

    aadt_current: float
    aadt_traffic_trucks: float
    truck_aadt_pct: float
    percent_single_truck_aadt: float
    percent_combo_truck_aadt: float
    aadt_traffic_single_unit_trucks: float
    aadt_combination_unit_trucks: float
    hpms_median_width: float
    number_of_through_lanes: float
    roadbed_width: float
    right_of_way_width_minimum: float
    shoulder_type_inside: int
    shoulder_type_outside: int
    surface_type: int
    peak_parking: int
    widening_obstacle: int

    def __post_init__(self):
        for name in ("truck_aadt_pct", "percent_single_truck_aadt", "percent_combo_truck_aadt"):
            if not 0.0 <= getattr(self, name) <= 100.0:
                raise ValueError(f"{name} outside [0, 100]")
        for name in ("aadt_current", "aadt_traffic_trucks", "aadt_traffic_single_unit_trucks",
                     "aadt_combination_unit_trucks", "hpms_median_width", "number_of_through_lanes",
                     "roadbed_width", "right_of_way_width_minimum"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be non-negative")
        for name, allowed in (("shoulder_type_inside", SHOULDER_CODES), ("shoulder_type_outside", SHOULDER_CODES),
                              ("surface_type", SURFACE_CODES), ("peak_parking", PARKING_CODES),
                              ("widening_obstacle", OBSTACLE_CODES)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} code {getattr(self, name)!r} not recognised")

    @classmethod
    def from_properties(cls, props: Mapping) -> AttributeRecord | None:
        """Build from GeoJSON properties; ``None`` if any column is missing or blank."""
        values = {}
        for f in fields(cls):
            raw = props.get(f.name)
            if raw is None or raw == "":
                return None
            num = float(raw)
            values[f.name] = int(num) if f.type == "int" else num
        return cls(**values)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


ATTRIBUTE_NAMES = tuple(f.name for f in fields(AttributeRecord))


@dataclass(frozen=True)
class RoadSegment:
    segment_id: str
    polyline: tuple[GeoPoint, ...]
    category: RoadCategory
    attributes: AttributeRecord | None = None
    oneway: bool = False

    def __post_init__(self):
        if len(set(self.polyline)) < 2:
            raise ValueError("polyline needs at least two distinct points")

    def length(self) -> float:
        u = unit_vectors([p.lat for p in self.polyline], [p.lon for p in self.polyline])
        return float(_arc(u[:-1], u[1:]).sum())

    def midpoint(self) -> GeoPoint:
        """Point halfway along the polyline by arc length."""
        u = unit_vectors([p.lat for p in self.polyline], [p.lon for p in self.polyline])
        legs = _arc(u[:-1], u[1:])
        target = legs.sum() / 2.0
        acc = np.cumsum(legs)
        k = int(np.searchsorted(acc, target))
        k = min(k, len(legs) - 1)
        before = acc[k] - legs[k]
        frac = (target - before) / legs[k] if legs[k] > 0 else 0.0
        v = _slerp(u[k], u[k + 1], frac)
        return GeoPoint(math.asin(max(-1.0, min(1.0, v[2]))), math.atan2(v[1], v[0]))


def _arc(u, v):
    """Great-circle distance in meters between rows of unit vectors."""
    return EARTH_RADIUS_M * np.arctan2(np.linalg.norm(np.cross(u, v), axis=-1), np.sum(u * v, axis=-1))


def _slerp(a, b, frac):
    omega = math.atan2(float(np.linalg.norm(np.cross(a, b))), float(a @ b))
    if omega == 0:
        return a
    return (math.sin((1 - frac) * omega) * a + math.sin(frac * omega) * b) / math.sin(omega)


@dataclass
class NetworkDiagnostics:
    features: int = 0
    segments: int = 0
    malformed: int = 0
    missing_attributes: int = 0
    messages: list[str] = field(default_factory=list)

    def as_text(self) -> str:
        lines = [f"features = {self.features}", f"segments = {self.segments}",
                 f"malformed_features = {self.malformed}", f"segments_without_attributes = {self.missing_attributes}"]
        lines += [f"malformed = {m}" for m in self.messages]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SegmentMatch:
    segment_id: str
    distance: float
    local_bearing: float


class RoadNetwork(Sequence):
    """Immutable segment collection with a spatial index over sub-edges."""

    def __init__(self, segments: Iterable[RoadSegment], diagnostics: NetworkDiagnostics | None = None):
        segs = list(segments)
        ids = [s.segment_id for s in segs]
        dup = [k for k, c in Counter(ids).items() if c > 1]
        if dup:
            raise DuplicateSegmentId(f"duplicate segment_id: {', '.join(sorted(dup))}")
        self.segments = sorted(segs, key=lambda s: s.segment_id)
        self.by_id = {s.segment_id: s for s in self.segments}
        self.diagnostics = diagnostics or NetworkDiagnostics(segments=len(segs))
        self._build_edges()

    def __len__(self) -> int:
        return len(self.segments)

    def __getitem__(self, k):
        return self.segments[k]

    def _build_edges(self):
        seg_idx, a_list, b_list = [], [], []
        for k, seg in enumerate(self.segments):
            pts = [p for n, p in enumerate(seg.polyline) if n == 0 or p != seg.polyline[n - 1]]
            u = unit_vectors([p.lat for p in pts], [p.lon for p in pts])
            for a, b in zip(u[:-1], u[1:]):
                length = float(_arc(a, b))
                if length == 0:
                    continue
                parts = max(1, math.ceil(length / _MAX_INDEX_EDGE_M))
                nodes = [_slerp(a, b, i / parts) for i in range(parts + 1)]
                nodes[0], nodes[-1] = a, b
                for s, e in zip(nodes[:-1], nodes[1:]):
                    seg_idx.append(k)
                    a_list.append(s)
                    b_list.append(e)
        self.edge_segment = np.asarray(seg_idx, dtype=np.int64)
        self.edge_a = np.asarray(a_list, dtype=float).reshape(-1, 3)
        self.edge_b = np.asarray(b_list, dtype=float).reshape(-1, 3)
        normal = np.cross(self.edge_a, self.edge_b)
        self.edge_normal = normal / np.linalg.norm(normal, axis=1, keepdims=True) if len(normal) else normal
        mid = self.edge_a + self.edge_b
        if len(mid):
            mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        self.edge_half = _arc(self.edge_a, self.edge_b) / 2.0 if len(mid) else np.zeros(0)
        lat_a = np.arcsin(np.clip(self.edge_a[:, 2], -1, 1))
        lon_a = np.arctan2(self.edge_a[:, 1], self.edge_a[:, 0])
        lat_b = np.arcsin(np.clip(self.edge_b[:, 2], -1, 1))
        lon_b = np.arctan2(self.edge_b[:, 1], self.edge_b[:, 0])
        self.edge_bearing = bearing_arrays(lat_a, lon_a, lat_b, lon_b)
        self.oneway = np.array([s.oneway for s in self.segments], dtype=bool)
        self._tree = cKDTree(mid * EARTH_RADIUS_M) if len(mid) else None
        self._max_half = float(self.edge_half.max()) if len(mid) else 0.0

    def edge_distances(self, p_xyz: np.ndarray, edges: np.ndarray) -> np.ndarray:
        """Point-to-arc distance (meters) between unit vectors ``p_xyz`` and sub-edges ``edges``."""
        a, b, n = self.edge_a[edges], self.edge_b[edges], self.edge_normal[edges]
        dot = np.sum(p_xyz * n, axis=-1)
        foot = p_xyz - dot[:, None] * n
        norm = np.linalg.norm(foot, axis=-1)
        foot = foot / np.where(norm > 0, norm, 1.0)[:, None]
        inside = (np.sum(np.cross(a, foot) * n, axis=-1) >= 0) & (np.sum(np.cross(foot, b) * n, axis=-1) >= 0)
        cross = EARTH_RADIUS_M * np.abs(np.arcsin(np.clip(dot, -1, 1)))
        ends = np.minimum(_arc(p_xyz, a), _arc(p_xyz, b))
        return np.where(inside & (norm > 0), cross, ends)

    def match_arrays(self, lat, lon, max_distance: float = 30.0):
        """Nearest segment per point (radian arrays).

        Returns ``(segment_index, distance, local_bearing)``; unmatched rows
        carry index ``-1``.
        """
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lon = np.atleast_1d(np.asarray(lon, dtype=float))
        n = len(lat)
        seg = np.full(n, -1, dtype=np.int64)
        dist = np.full(n, np.inf)
        bearing = np.full(n, np.nan)
        if n == 0 or self._tree is None:
            return seg, dist, bearing
        xyz = unit_vectors(lat, lon)
        r = float(chord_length(max_distance + self._max_half + 1.0))
        hits = self._tree.query_ball_point(xyz * EARTH_RADIUS_M, r)
        counts = np.fromiter((len(h) for h in hits), dtype=np.int64, count=n)
        if counts.sum() == 0:
            return seg, dist, bearing
        point = np.repeat(np.arange(n), counts)
        edges = np.fromiter((e for h in hits for e in h), dtype=np.int64, count=int(counts.sum()))
        d = self.edge_distances(xyz[point], edges)
        within = d <= max_distance
        point, edges, d = point[within], edges[within], d[within]
        if len(point) == 0:
            return seg, dist, bearing
        best = np.full(n, np.inf)
        np.minimum.at(best, point, d)
        tie = d <= best[point] + _TIE_EPS_M
        point, edges, d = point[tie], edges[tie], d[tie]
        # segments are stored sorted by id, so the smallest index is the smallest id
        order = np.lexsort((d, self.edge_segment[edges], point))
        point, edges, d = point[order], edges[order], d[order]
        first = np.r_[True, point[1:] != point[:-1]]
        p, e = point[first], edges[first]
        seg[p] = self.edge_segment[e]
        dist[p] = d[first]
        bearing[p] = self.edge_bearing[e]
        return seg, dist, bearing

    def aligned(self, seg: np.ndarray, local_bearing: np.ndarray, heading: np.ndarray,
                tolerance: float = 45.0) -> np.ndarray:
        """Heading agrees with the segment direction (either way unless one-way)."""
        diff = heading_difference(heading, local_bearing)
        oneway = self.oneway[np.where(seg >= 0, seg, 0)]
        folded = np.where(oneway, diff, np.minimum(diff, 180.0 - diff))
        return (seg >= 0) & (folded <= tolerance)


def _as_geojson(source) -> dict:
    if isinstance(source, Mapping):
        return dict(source)
    if isinstance(source, (str, Path)):
        return json.loads(Path(source).read_text(encoding="utf-8"))
    return json.load(source)


def _points(coords) -> tuple[GeoPoint, ...]:
    out = []
    for c in coords:
        lon, lat = float(c[0]), float(c[1])
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise ValueError("coordinate out of range")
        out.append(GeoPoint.from_degrees(lat, lon))
    return tuple(out)


def load_network(source) -> RoadNetwork:
    """Load a GeoJSON FeatureCollection of LineString / MultiLineString roads.

    Malformed features are skipped and counted; a repeated ``segment_id`` is
    fatal.  Multi-part features become one segment per part with ids
    suffixed ``_1``, ``_2``, ...
    """
    doc = _as_geojson(source)
    diag = NetworkDiagnostics()
    segments = []
    for n, feat in enumerate(doc.get("features", [])):
        diag.features += 1
        try:
            props = feat.get("properties") or {}
            geom = feat.get("geometry") or {}
            sid = props.get("segment_id")
            if sid is None or str(sid).strip() == "":
                raise MalformedFeature("missing segment_id")
            if props.get("category") in (None, ""):
                raise MalformedFeature("missing category")
            try:
                category = RoadCategory(str(props["category"]).strip().upper())
            except ValueError:
                raise MalformedFeature(f"unknown category {props['category']!r}") from None
            try:
                attrs = AttributeRecord.from_properties(props)
            except (TypeError, ValueError):
                attrs = None
            if attrs is None:
                diag.missing_attributes += 1
            oneway = str(props.get("oneway", "false")).lower() in ("1", "true", "yes")
            if geom.get("type") == "LineString":
                parts = [(str(sid), geom["coordinates"])]
            elif geom.get("type") == "MultiLineString":
                parts = [(f"{sid}_{k}", c) for k, c in enumerate(geom["coordinates"], start=1)]
            else:
                raise MalformedFeature(f"unsupported geometry {geom.get('type')!r}")
            built = [RoadSegment(pid, _points(c), category, attrs, oneway) for pid, c in parts]
        except (MalformedFeature, ValueError, TypeError, KeyError, IndexError) as exc:
            diag.malformed += 1
            diag.messages.append(f"feature {n}: {exc}")
            continue
        segments.extend(built)
    diag.segments = len(segments)
    return RoadNetwork(segments, diag)


def network_geojson(network: RoadNetwork) -> dict:
    feats = []
    for seg in network.segments:
        props = {"segment_id": seg.segment_id, "category": seg.category.value, "oneway": seg.oneway}
        if seg.attributes is not None:
            props.update(seg.attributes.as_dict())
        feats.append({
            "type": "Feature",
            "geometry": {"type": "LineString",
                         "coordinates": [[round(p.lon_deg, 7), round(p.lat_deg, 7)] for p in seg.polyline]},
            "properties": props,
        })
    return {"type": "FeatureCollection", "features": feats}


def nearest_segment(p: GeoPoint, network: RoadNetwork, max_distance: float = 30.0) -> SegmentMatch | None:
    seg, dist, bearing = network.match_arrays([p.lat], [p.lon], max_distance)
    if seg[0] < 0:
        return None
    return SegmentMatch(network.segments[seg[0]].segment_id, float(dist[0]), float(bearing[0]))


class FilterReason(str, enum.Enum):
    NO_SEGMENT = "NoSegment"
    NOT_SAME_DIRECTION = "NotSameDirection"
    HEADING_MISALIGNED = "HeadingMisaligned"


@dataclass
class AssignmentResult:
    matched: list[NearCrashEvent]
    filtered: list[tuple[NearCrashEvent, FilterReason]]

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(r.value for _, r in self.filtered)
        return {r.value: c.get(r.value, 0) for r in FilterReason}

    def as_text(self) -> str:
        lines = [f"events = {len(self.matched) + len(self.filtered)}", f"matched = {len(self.matched)}"]
        lines += [f"filtered_{k} = {v}" for k, v in self.counts.items()]
        return "\n".join(lines) + "\n"


def assign_events(events: Sequence[NearCrashEvent], network: RoadNetwork, max_distance: float = 30.0,
                  heading_tolerance: float = 45.0) -> AssignmentResult:
    """Attach each event to the segment nearest its conflict point.

    Events are kept only when a segment lies within ``max_distance``, the
    pair travels in the same direction, and both headings agree with the
    segment's local bearing.
    """
    if not events:
        return AssignmentResult([], [])
    lat = np.array([e.conflict_point.lat for e in events])
    lon = np.array([e.conflict_point.lon for e in events])
    seg, _, bearing = network.match_arrays(lat, lon, max_distance)
    ha = np.array([e.p_a.heading for e in events])
    hb = np.array([e.p_b.heading for e in events])
    ok_a = network.aligned(seg, bearing, ha, heading_tolerance)
    ok_b = network.aligned(seg, bearing, hb, heading_tolerance)
    matched, filtered = [], []
    for k, ev in enumerate(events):
        if seg[k] < 0:
            filtered.append((replace(ev, matched_segment=None), FilterReason.NO_SEGMENT))
        elif ev.direction_class is not DirectionClass.SAME:
            filtered.append((replace(ev, matched_segment=None), FilterReason.NOT_SAME_DIRECTION))
        elif not (ok_a[k] and ok_b[k]):
            filtered.append((replace(ev, matched_segment=None), FilterReason.HEADING_MISALIGNED))
        else:
            matched.append(replace(ev, matched_segment=network.segments[seg[k]].segment_id))
    return AssignmentResult(matched, filtered)


def match_points(points: PointTable, network: RoadNetwork, max_distance: float = 30.0,
                 heading_tolerance: float = 45.0) -> np.ndarray:
    """Segment index per point row, ``-1`` where unmatched or misaligned."""
    seg, _, bearing = network.match_arrays(points.lat_rad, points.lon_rad, max_distance)
    ok = network.aligned(seg, bearing, points.heading, heading_tolerance)
    return np.where(ok, seg, -1)


def count_traversals(points: PointTable, network: RoadNetwork, max_distance: float = 30.0,
                     heading_tolerance: float = 45.0, segment_per_row: np.ndarray | None = None) -> dict[str, int]:
    """Distinct journeys with at least one aligned point matched to each segment."""
    if segment_per_row is None:
        segment_per_row = match_points(points, network, max_distance, heading_tolerance)
    keep = segment_per_row >= 0
    pairs = set(zip(points.journey_id[keep].tolist(), segment_per_row[keep].tolist()))
    counts = Counter(seg for _, seg in pairs)
    return {network.segments[k].segment_id: counts[k] for k in sorted(counts)}


class RiskClass(str, enum.Enum):
    LOW = "Low"
    HIGH = "High"


def classify_ratio(ratio: float, boundary: float = 0.01) -> RiskClass:
    return RiskClass.LOW if ratio < boundary else RiskClass.HIGH


@dataclass(frozen=True)
class SegmentRiskSummary:
    segment_id: str
    event_count: int
    vehicle_count: int
    risk_ratio: float
    risk_class: RiskClass


@dataclass
class RiskDiagnostics:
    excluded_no_vehicles: list[str] = field(default_factory=list)

    def as_text(self) -> str:
        lines = [f"excluded_zero_vehicle_segments = {len(self.excluded_no_vehicles)}"]
        lines += [f"excluded = {s}" for s in self.excluded_no_vehicles]
        return "\n".join(lines) + "\n"


def segment_risk_ratio(event_counts: Mapping[str, int], vehicle_counts: Mapping[str, int],
                       boundary: float = 0.01, diagnostics: RiskDiagnostics | None = None) -> list[SegmentRiskSummary]:
    """Events per passing vehicle for each segment, with the Low/High split."""
    out = []
    for sid in sorted(set(event_counts) | set(vehicle_counts)):
        events = int(event_counts.get(sid, 0))
        vehicles = int(vehicle_counts.get(sid, 0))
        if vehicles == 0:
            if diagnostics is not None and events > 0:
                diagnostics.excluded_no_vehicles.append(sid)
            continue
        ratio = events / vehicles
        out.append(SegmentRiskSummary(sid, events, vehicles, ratio, classify_ratio(ratio, boundary)))
    return out


RISK_COLUMNS = ("segment_id", "category", "event_count", "vehicle_count", "risk_ratio", "risk_class")


def write_risk_csv(summaries: Sequence[SegmentRiskSummary], network: RoadNetwork, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(RISK_COLUMNS)
    for s in summaries:
        seg = network.by_id.get(s.segment_id)
        w.writerow((s.segment_id, seg.category.value if seg else "", s.event_count, s.vehicle_count,
                    f"{s.risk_ratio:.6f}", s.risk_class.value))


def read_risk_csv(stream) -> list[SegmentRiskSummary]:
    return [
        SegmentRiskSummary(r["segment_id"], int(r["event_count"]), int(r["vehicle_count"]),
                           float(r["risk_ratio"]), RiskClass(r["risk_class"]))
        for r in csv.DictReader(stream)
    ]


def risk_geojson(summaries: Sequence[SegmentRiskSummary], network: RoadNetwork) -> dict:
    feats = []
    for s in summaries:
        seg = network.by_id[s.segment_id]
        feats.append({
            "type": "Feature",
            "geometry": {"type": "LineString",
                         "coordinates": [[round(p.lon_deg, 7), round(p.lat_deg, 7)] for p in seg.polyline]},
            "properties": {"segment_id": s.segment_id, "category": seg.category.value,
                           "event_count": s.event_count, "vehicle_count": s.vehicle_count,
                           "risk_ratio": round(s.risk_ratio, 6), "risk_class": s.risk_class.value},
        })
    return {"type": "FeatureCollection", "features": feats}
