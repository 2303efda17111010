"""Deterministic synthetic road grids and journeys with injected conflicts."""
from __future__ import annotations

import csv
import json
import math
from collections.abc import Sequence
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone

import numpy as np

from .geo import (EARTH_RADIUS_M, GeoPoint, bearing_arrays, destination_arrays, destination_point,
                  haversine_distance, initial_bearing, normalize_bearing, unit_vectors)
from .ingest import (SPEED_FACTORS, IngestConfig, Ignition, PointTable, _parse_time, format_time,
                     serialize_records)
from .mapmatch import (OBSTACLE_CODES, PARKING_CODES, SHOULDER_CODES, SURFACE_CODES, AttributeRecord,
                       RoadCategory, RoadNetwork, RoadSegment, network_geojson)


def _unit(p: GeoPoint) -> np.ndarray:
    return unit_vectors(p.lat, p.lon)[0]


def _arc(p: GeoPoint, q: GeoPoint) -> float:
    # Well conditioned up to antipodal separations, unlike haversine.
    u, v = _unit(p), _unit(q)
    return EARTH_RADIUS_M * math.atan2(float(np.linalg.norm(np.cross(u, v))), float(u @ v))


def stepping_intersection(p1: GeoPoint, b1: float, p2: GeoPoint, b2: float, coarse_step: float = 1000.0):
    """Locate the forward crossing of two radials by marching along them.

    Independent of the closed-form solver: radial 1 is stepped with
    ``destination_point`` until it changes side of radial 2's great circle,
    the bracket is bisected to sub-millimetre width, and the candidate is
    accepted only if marching radial 2 by the same arc lands on it.

    Returns ``(point, s1, s2)`` in meters or ``None``.
    """
    if _arc(p1, p2) == 0.0:
        return None
    n2 = np.cross(_unit(p2), _unit(destination_point(p2, b2, 1000.0)))
    n2 /= np.linalg.norm(n2)

    half = math.pi * EARTH_RADIUS_M
    s = np.append(np.arange(0.0, half, coarse_step), half)
    lat, lon = destination_arrays(np.full(s.shape, p1.lat), np.full(s.shape, p1.lon), np.full(s.shape, b1), s)
    side = unit_vectors(lat, lon) @ n2
    if abs(side[0]) < 1e-15 or np.all(np.abs(side) < 1e-12):
        return None
    flips = np.nonzero(np.sign(side[1:]) != np.sign(side[:-1]))[0]
    if flips.size == 0:
        return None
    lo, hi = float(s[flips[0]]), float(s[flips[0] + 1])
    side_lo = np.sign(side[flips[0]])

    def f(dist):
        return float(_unit(destination_point(p1, b1, dist)) @ n2)

    while hi - lo > 1e-4:
        mid = 0.5 * (lo + hi)
        if np.sign(f(mid)) == side_lo:
            lo = mid
        else:
            hi = mid
    s1 = 0.5 * (lo + hi)
    p3 = destination_point(p1, b1, s1)
    s2 = _arc(p2, p3)
    if s2 < 1e-3:
        return None
    if _arc(destination_point(p2, b2, s2), p3) > 1e-2:
        return None
    return p3, s1, s2


# -- configuration ----------------------------------------------------------

class InjectionInfeasible(ValueError):
    """The grid or journey pool cannot host the requested injections."""


@dataclass(frozen=True)
class SimConfig:
    """Synthetic scenario settings.

    ``grid_rows`` and ``grid_cols`` count blocks, so the network has
    ``(rows + 1) * cols`` east-west and ``(cols + 1) * rows`` north-south
    segments.  ``journeys`` includes the two journeys used by each injection.
    """

    seed: int = 0
    grid_rows: int = 6
    grid_cols: int = 6
    block_length: float = 400.0
    journeys: int = 40
    sample_interval: float = 3.0
    conflict_injections: int = 4
    speed_range: tuple[float, float] = (8.0, 20.0)
    day_span: tuple[date, date] = (date(2021, 11, 1), date(2021, 11, 30))
    origin: tuple[float, float] = (29.4241, -98.4936)
    edges_per_journey: int = 8
    speed_unit: str = "mph"

    def __post_init__(self):
        for name in ("grid_rows", "grid_cols", "journeys", "edges_per_journey"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.conflict_injections < 0:
            raise ValueError("conflict_injections must be non-negative")
        if not self.sample_interval > 0 or not self.block_length > 0:
            raise ValueError("sample_interval and block_length must be positive")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError("speed_range must be a positive interval")
        if self.day_span[1] < self.day_span[0]:
            raise ValueError("day_span ends before it starts")


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; the documented generator behind every draw here."""
    return np.random.Generator(np.random.PCG64(seed))


# -- network ----------------------------------------------------------------

def _node(cfg: SimConfig, r: int, c: int) -> GeoPoint:
    lat0, lon0 = math.radians(cfg.origin[0]), math.radians(cfg.origin[1])
    return GeoPoint(lat0 + r * cfg.block_length / EARTH_RADIUS_M,
                    lon0 + c * cfg.block_length / (EARTH_RADIUS_M * math.cos(lat0)))


def _attributes(rng: np.random.Generator) -> AttributeRecord:
    # Ranges follow the road-inventory catalogue (min and max per column).
    aadt = float(rng.integers(54, 262596))
    truck_pct = round(float(rng.uniform(0.0, 32.2)), 1)
    single_pct = round(float(rng.uniform(max(0.0, truck_pct - 24.5), min(17.1, truck_pct))), 1)
    combo_pct = round(min(24.5, max(0.0, truck_pct - single_pct)), 1)
    return AttributeRecord(
        aadt_current=aadt,
        aadt_traffic_trucks=float(min(28646, round(aadt * truck_pct / 100))),
        truck_aadt_pct=truck_pct,
        percent_single_truck_aadt=single_pct,
        percent_combo_truck_aadt=combo_pct,
        aadt_traffic_single_unit_trucks=float(min(8998, round(aadt * single_pct / 100))),
        aadt_combination_unit_trucks=float(min(20223, round(aadt * combo_pct / 100))),
        hpms_median_width=float(rng.integers(0, 97)),
        number_of_through_lanes=float(rng.integers(1, 13)),
        roadbed_width=float(rng.integers(0, 237)),
        right_of_way_width_minimum=float(rng.integers(0, 501)),
        shoulder_type_inside=int(rng.choice(sorted(SHOULDER_CODES))),
        shoulder_type_outside=int(rng.choice(sorted(SHOULDER_CODES))),
        surface_type=int(rng.choice(sorted(SURFACE_CODES))),
        peak_parking=int(rng.choice(sorted(PARKING_CODES))),
        widening_obstacle=int(rng.choice(sorted(OBSTACLE_CODES))),
    )


def generate_network(cfg: SimConfig) -> RoadNetwork:
    """Grid of straight two-way segments with cycled categories and drawn attributes.

    Segment ``H{r}_{c}`` joins node ``(r, c)`` to ``(r, c + 1)`` and
    ``V{r}_{c}`` joins ``(r, c)`` to ``(r + 1, c)``.
    """
    rng = make_rng(cfg.seed)
    ends = []
    for r in range(cfg.grid_rows + 1):
        for c in range(cfg.grid_cols):
            ends.append((f"H{r:03d}_{c:03d}", (r, c), (r, c + 1)))
    for r in range(cfg.grid_rows):
        for c in range(cfg.grid_cols + 1):
            ends.append((f"V{r:03d}_{c:03d}", (r, c), (r + 1, c)))
    cats = list(RoadCategory)
    segs = [RoadSegment(sid, (_node(cfg, *a), _node(cfg, *b)), cats[k % len(cats)], _attributes(rng))
            for k, (sid, a, b) in enumerate(ends)]
    return RoadNetwork(segs)


def _grid_edges(cfg: SimConfig) -> dict[frozenset, str]:
    out = {}
    for r in range(cfg.grid_rows + 1):
        for c in range(cfg.grid_cols):
            out[frozenset(((r, c), (r, c + 1)))] = f"H{r:03d}_{c:03d}"
    for r in range(cfg.grid_rows):
        for c in range(cfg.grid_cols + 1):
            out[frozenset(((r, c), (r + 1, c)))] = f"V{r:03d}_{c:03d}"
    return out


def _neighbours(cfg: SimConfig, node):
    r, c = node
    cand = ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
    return [(a, b) for a, b in cand if 0 <= a <= cfg.grid_rows and 0 <= b <= cfg.grid_cols]


def _walk(cfg: SimConfig, rng: np.random.Generator, start, steps: int, previous=None) -> list:
    """Random node walk without immediate reversals where avoidable."""
    nodes = [start]
    prev = previous
    for _ in range(steps):
        options = [n for n in _neighbours(cfg, nodes[-1]) if n != prev] or _neighbours(cfg, nodes[-1])
        prev = nodes[-1]
        nodes.append(options[int(rng.integers(len(options)))])
    return nodes


# -- sampling along paths ---------------------------------------------------

def _bearing_of_tangent(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    lat = np.arcsin(np.clip(p[:, 2], -1.0, 1.0))
    lon = np.arctan2(p[:, 1], p[:, 0])
    east = np.column_stack((-np.sin(lon), np.cos(lon), np.zeros_like(lon)))
    north = np.column_stack((-np.sin(lat) * np.cos(lon), -np.sin(lat) * np.sin(lon), np.cos(lat)))
    return np.degrees(np.arctan2(np.sum(t * east, axis=1), np.sum(t * north, axis=1))) % 360.0


def sample_path(vertices: Sequence[GeoPoint], s: np.ndarray):
    """Positions and course along a great-circle polyline at arc lengths ``s``.

    Returns ``(lat_deg, lon_deg, heading_deg)``; ``s`` is clipped to the path.
    """
    u = unit_vectors([p.lat for p in vertices], [p.lon for p in vertices])
    legs = EARTH_RADIUS_M * np.arctan2(np.linalg.norm(np.cross(u[:-1], u[1:]), axis=1),
                                       np.sum(u[:-1] * u[1:], axis=1))
    cum = np.r_[0.0, np.cumsum(legs)]
    s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(legs) - 1)
    theta = legs[k] / EARTH_RADIUS_M
    frac = (s - cum[k]) / legs[k]
    a, b = u[k], u[k + 1]
    sin_t = np.sin(theta)[:, None]
    p = (np.sin((1 - frac) * theta)[:, None] * a + np.sin(frac * theta)[:, None] * b) / sin_t
    normal = np.cross(a, b)
    normal /= np.linalg.norm(normal, axis=1)[:, None]
    tangent = np.cross(normal, p)
    lat = np.degrees(np.arcsin(np.clip(p[:, 2], -1.0, 1.0)))
    lon = np.degrees(np.arctan2(p[:, 1], p[:, 0]))
    return lat, lon, _bearing_of_tangent(p, tangent)


def path_length(vertices: Sequence[GeoPoint]) -> float:
    return float(sum(_arc(a, b) for a, b in zip(vertices[:-1], vertices[1:])))


# -- journeys ---------------------------------------------------------------

@dataclass(frozen=True)
class GroundTruthConflict:
    journey_a: str
    journey_b: str
    t: float
    oracle_ttc: float
    segment_id: str


@dataclass
class _Track:
    journey_id: str
    vertices: list
    speed: float
    t_first: float
    s_first: float
    n: int


def _quantize(lat, lon, speed, heading, unit: str):
    """Values exactly as they read back after the CSV round trip."""
    f = SPEED_FACTORS[unit]
    lat = np.array([float(f"{x:.6f}") for x in lat])
    lon = np.array([float(f"{x:.6f}") for x in lon])
    speed = np.array([float(f"{x / f:.4f}") * f for x in speed])
    heading = np.array([float(f"{x:.2f}") % 360.0 for x in heading])
    return lat, lon, speed, heading


def _track_table(tr: _Track, dt: float, unit: str) -> PointTable:
    k = np.arange(tr.n)
    lat, lon, hdg = sample_path(tr.vertices, tr.s_first + k * tr.speed * dt)
    lat, lon, speed, hdg = _quantize(lat, lon, np.full(tr.n, tr.speed), hdg, unit)
    ign = np.full(tr.n, int(Ignition.MID_JOURNEY), dtype=np.int8)
    ign[0] = int(Ignition.KEY_ON)
    if tr.n > 1:
        ign[-1] = int(Ignition.KEY_OFF)
    pids = [f"{tr.journey_id}-{i:05d}" for i in k]
    return PointTable(pids, [tr.journey_id] * tr.n, tr.t_first + k * dt, lat, lon, speed, hdg, ign)


def _track(journey_id: str, vertices: list, speed: float, dt: float, t_anchor: float, s_anchor: float) -> _Track:
    """Track sampled so that one fix falls at arc ``s_anchor`` at time ``t_anchor``."""
    step = speed * dt
    back = math.floor(s_anchor / step + 1e-9)
    s_first = s_anchor - back * step
    n = int(math.floor((path_length(vertices) - s_first) / step + 1e-9)) + 1
    return _Track(journey_id, vertices, speed, t_anchor - back * dt, s_first, n)


def _random_instant(cfg: SimConfig, rng: np.random.Generator) -> float:
    days = (cfg.day_span[1] - cfg.day_span[0]).days + 1
    d = cfg.day_span[0] + timedelta(days=int(rng.integers(days)))
    start = datetime(d.year, d.month, d.day, tzinfo=timezone.utc).timestamp()
    return start + float(rng.integers(86400))


def _inject(cfg: SimConfig, rng: np.random.Generator, edge: tuple, edge_id: str, ja: str, jb: str):
    """One same-direction merge conflict on ``edge``; ``None`` if the draw fails checks."""
    dt = cfg.sample_interval
    lo, hi = cfg.speed_range
    n0, n1 = edge if rng.random() < 0.5 else edge[::-1]
    p0, p1 = _node(cfg, *n0), _node(cfg, *n1)
    length = _arc(p0, p1)
    va, vb = float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))
    ta = float(rng.uniform(1.0, 2.5))
    tb = max(0.5, ta + float(rng.uniform(-1.0, 1.0)))
    frac_lo = max(0.2, (va * ta + 1.0) / length)
    if frac_lo > 0.8:
        raise InjectionInfeasible(f"blocks of {cfg.block_length} m are too short for the injected approach")
    frac = float(rng.uniform(frac_lo, 0.8))
    c_pt = destination_point(p0, initial_bearing(p0, p1), frac * length)
    road = initial_bearing(c_pt, p1)
    delta = float(rng.uniform(8.0, 20.0)) * (1 if rng.random() < 0.5 else -1)
    t_conf = _random_instant(cfg, rng)

    # A runs along the road through C
    before = _walk(cfg, rng, n0, 2, previous=n1)[::-1]
    after = _walk(cfg, rng, n1, cfg.edges_per_journey, previous=n0)
    verts_a = [_node(cfg, *n) for n in before] + [_node(cfg, *n) for n in after]
    s_c = path_length(verts_a[:len(before)]) + frac * length
    track_a = _track(ja, verts_a, va, dt, t_conf, s_c - va * ta)

    # B approaches C at an angle, then merges onto the road
    approach = normalize_bearing(road + delta)
    run_in = vb * tb + 4 * vb * dt
    start_b = destination_point(c_pt, normalize_bearing(approach + 180.0), run_in)
    verts_b = [start_b, c_pt] + [_node(cfg, *n) for n in after]
    track_b = _track(jb, verts_b, vb, dt, t_conf, run_in - vb * tb)

    ta_tab, tb_tab = _track_table(track_a, dt, cfg.speed_unit), _track_table(track_b, dt, cfg.speed_unit)
    ia = int(np.flatnonzero(np.abs(ta_tab.t - t_conf) < 1e-6)[0])
    ib = int(np.flatnonzero(np.abs(tb_tab.t - t_conf) < 1e-6)[0])
    pa, pb = ta_tab[ia], tb_tab[ib]
    if haversine_distance(pa.pos, pb.pos) > 90.0:
        return None
    hit = stepping_intersection(pa.pos, pa.heading, pb.pos, pb.heading)
    if hit is None:
        return None
    _, s1, s2 = hit
    t13, t23 = s1 / pa.speed, s2 / pb.speed
    ttc = min(t13, t23)
    if ttc > 2.5 or abs(t13 - t23) > 1.5:
        return None
    pair = sorted((ja, jb))
    return (ta_tab, tb_tab), GroundTruthConflict(pair[0], pair[1], t_conf, ttc, edge_id)


def generate_journeys(cfg: SimConfig, network: RoadNetwork | None = None):
    """Grid-following journeys plus injected conflicts.

    Returns ``(points, ground_truth)`` where ``points`` is a :class:`PointTable`
    carrying the values exactly as written to CSV, and ``ground_truth`` lists
    each injected pair with its oracle TTC.

    Raises
    ------
    InjectionInfeasible
        More injections than segments, or than journey pairs.
    """
    network = network if network is not None else generate_network(cfg)
    edges = sorted(_grid_edges(cfg).items(), key=lambda kv: kv[1])
    k = cfg.conflict_injections
    if k > len(edges):
        raise InjectionInfeasible(f"{k} injections need distinct segments; the grid has {len(edges)}")
    if 2 * k > cfg.journeys:
        raise InjectionInfeasible(f"{k} injections need {2 * k} journeys; only {cfg.journeys} configured")
    rng = make_rng(cfg.seed + 1)
    ids = [f"J{n:05d}" for n in range(1, cfg.journeys + 1)]
    tables, truth = [], []
    chosen = rng.permutation(len(edges))[:k]
    for n, e in enumerate(chosen):
        nodes, edge_id = edges[int(e)]
        for _ in range(200):
            got = _inject(cfg, rng, tuple(sorted(nodes)), edge_id, ids[2 * n], ids[2 * n + 1])
            if got is not None:
                break
        else:
            raise InjectionInfeasible(f"could not place a conflict on {edge_id}")
        tables.extend(got[0])
        truth.append(got[1])
    lo, hi = cfg.speed_range
    for jid in ids[2 * k:]:
        start = (int(rng.integers(cfg.grid_rows + 1)), int(rng.integers(cfg.grid_cols + 1)))
        verts = [_node(cfg, *n) for n in _walk(cfg, rng, start, cfg.edges_per_journey)]
        v = float(rng.uniform(lo, hi))
        tr = _track(jid, verts, v, cfg.sample_interval, _random_instant(cfg, rng), 0.0)
        tables.append(_track_table(tr, cfg.sample_interval, cfg.speed_unit))
    points = PointTable.concat(tables)
    order = np.lexsort((points.t, points.journey_id.astype(str)))
    truth.sort(key=lambda g: (g.t, g.journey_a, g.journey_b))
    return points.take(order), truth


def generate_scatter(n_points: int, seed: int = 0, center: tuple[float, float] = (29.4241, -98.4936),
                     extent_m: float = 20000.0, duration_s: float = 7200.0, points_per_journey: int = 100,
                     sample_interval: float = 3.0, speed_range: tuple[float, float] = (8.0, 30.0),
                     start: float = 1635760800.0) -> PointTable:
    """Large straight-line scatter for load tests.

    Journeys start uniformly inside a square of side ``extent_m`` and inside
    ``duration_s``, then keep a random course at constant speed.  Fully
    vectorised; values are quantised like CSV output in m/s.
    """
    rng = make_rng(seed)
    n_j = max(1, math.ceil(n_points / points_per_journey))
    lat0, lon0 = math.radians(center[0]), math.radians(center[1])
    half = extent_m / 2.0
    north = rng.uniform(-half, half, n_j)
    east = rng.uniform(-half, half, n_j)
    slat = lat0 + north / EARTH_RADIUS_M
    slon = lon0 + east / (EARTH_RADIUS_M * math.cos(lat0))
    course = rng.uniform(0.0, 360.0, n_j)
    speed = rng.uniform(*speed_range, n_j)
    t0 = start + np.floor(rng.uniform(0.0, duration_s, n_j))
    jn = np.repeat(np.arange(n_j), points_per_journey)[:n_points]
    k = np.tile(np.arange(points_per_journey), n_j)[:n_points]
    lat, lon = destination_arrays(slat[jn], slon[jn], course[jn], speed[jn] * k * sample_interval)
    # course drifts along a great circle, so take it from a point just ahead
    dist = speed[jn] * k * sample_interval
    ahead_lat, ahead_lon = destination_arrays(slat[jn], slon[jn], course[jn], dist + 1.0)
    heading = np.round(bearing_arrays(lat, lon, ahead_lat, ahead_lon), 2) % 360.0
    jid = np.array([f"S{n:07d}" for n in range(n_j)], dtype=object)[jn]
    pid = np.char.add(np.char.add(jid.astype(str), "-"), np.char.zfill(k.astype(str), 4)).astype(object)
    ign = np.full(n_points, int(Ignition.MID_JOURNEY), dtype=np.int8)
    ign[k == 0] = int(Ignition.KEY_ON)
    return PointTable(pid, jid, t0[jn] + k * sample_interval, np.round(np.degrees(lat), 6),
                      np.round(np.degrees(lon), 6), np.round(speed[jn], 4), heading, ign)


# -- writers ----------------------------------------------------------------

def write_trajectories(points: PointTable, path, unit: str = "mph") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        serialize_records(points, fh, IngestConfig(speed_unit=unit))


def write_network(network: RoadNetwork, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(network_geojson(network), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


GROUND_TRUTH_COLUMNS = ("journey_a", "journey_b", "t", "oracle_ttc_s", "segment_id")


def write_ground_truth(truth: Sequence[GroundTruthConflict], stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(GROUND_TRUTH_COLUMNS)
    for g in truth:
        w.writerow((g.journey_a, g.journey_b, format_time(g.t), f"{g.oracle_ttc:.4f}", g.segment_id))


def read_ground_truth(stream) -> list[GroundTruthConflict]:
    return [GroundTruthConflict(r["journey_a"], r["journey_b"], _parse_time(r["t"]), float(r["oracle_ttc_s"]),
                                r.get("segment_id", ""))
            for r in csv.DictReader(stream)]
