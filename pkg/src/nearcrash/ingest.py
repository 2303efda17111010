"""Connected-vehicle record parsing, journey assembly and GPS-drift removal.

Points are held column-wise in a :class:`PointTable` so that million-row
inputs stay cheap; indexing a table yields ordinary :class:`TrajectoryPoint`
rows.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .geo import GeoPoint, haversine_arrays, haversine_distance

log = logging.getLogger(__name__)

SPEED_FACTORS = {"mph": 0.44704, "kmh": 1.0 / 3.6, "ms": 1.0}

COLUMNS = ("datapoint_id", "journey_id", "timestamp", "lat", "lon", "speed", "heading", "ignition_status")

_MAX_KEPT_ERRORS = 1000


class Ignition(enum.IntEnum):
    KEY_ON = 0
    MID_JOURNEY = 1
    KEY_OFF = 2

    @property
    def label(self) -> str:
        return self.name.replace("_", " ")

    @classmethod
    def parse(cls, text: str) -> Ignition:
        # accepts "KEY OFF", "key_off", "KeyOff"
        key = "".join(ch for ch in text.upper() if ch.isalnum())
        for member in cls:
            if member.name.replace("_", "") == key:
                return member
        raise KeyError(text)


class IngestError(ValueError):
    """Fatal ingest problem (bad header, unknown unit)."""


class UnknownUnitError(IngestError):
    pass


class MalformedRow(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


@dataclass
class IngestConfig:
    delimiter: str = ","
    speed_unit: str = "mph"

    def __post_init__(self):
        if self.speed_unit not in SPEED_FACTORS:
            raise UnknownUnitError(f"unknown speed unit {self.speed_unit!r}; expected one of {sorted(SPEED_FACTORS)}")

    @property
    def speed_factor(self) -> float:
        return SPEED_FACTORS[self.speed_unit]


@dataclass
class IngestDiagnostics:
    rows_read: int = 0
    parsed: int = 0
    skipped: int = 0
    duplicates: int = 0
    drift_dropped: int = 0
    errors: list[MalformedRow] = field(default_factory=list)

    def record_error(self, err: MalformedRow) -> None:
        self.skipped += 1
        if len(self.errors) < _MAX_KEPT_ERRORS:
            self.errors.append(err)

    @property
    def retained(self) -> int:
        return self.parsed - self.duplicates - self.drift_dropped

    def as_text(self) -> str:
        lines = [
            f"rows_read = {self.rows_read}",
            f"parsed = {self.parsed}",
            f"skipped = {self.skipped}",
            f"duplicates = {self.duplicates}",
            f"drift_dropped = {self.drift_dropped}",
            f"retained = {self.retained}",
        ]
        lines += [f"malformed = {e}" for e in self.errors]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class TrajectoryPoint:
    point_id: str
    journey_id: str
    t: float
    pos: GeoPoint
    speed: float
    heading: float
    ignition: Ignition = Ignition.MID_JOURNEY

    def __post_init__(self):
        if not self.speed >= 0:
            raise ValueError("speed must be non-negative")
        if not 0.0 <= self.heading < 360.0:
            raise ValueError("heading must lie in [0, 360)")

    @property
    def time(self) -> datetime:
        return datetime.fromtimestamp(self.t, tz=timezone.utc)


class PointTable(Sequence):
    """Column store of trajectory points (degrees, m/s, epoch seconds)."""

    __slots__ = ("point_id", "journey_id", "t", "lat", "lon", "speed", "heading", "ignition")

    def __init__(self, point_id, journey_id, t, lat, lon, speed, heading, ignition):
        self.point_id = np.asarray(point_id, dtype=object)
        self.journey_id = np.asarray(journey_id, dtype=object)
        self.t = np.asarray(t, dtype=np.float64)
        self.lat = np.asarray(lat, dtype=np.float64)
        self.lon = np.asarray(lon, dtype=np.float64)
        self.speed = np.asarray(speed, dtype=np.float64)
        self.heading = np.asarray(heading, dtype=np.float64)
        self.ignition = np.asarray(ignition, dtype=np.int8)
        n = len(self.t)
        if any(len(getattr(self, name)) != n for name in self.__slots__):
            raise ValueError("column lengths differ")

    @classmethod
    def empty(cls) -> PointTable:
        return cls([], [], [], [], [], [], [], [])

    @classmethod
    def from_points(cls, points: Iterable[TrajectoryPoint]) -> PointTable:
        pts = list(points)
        return cls(
            [p.point_id for p in pts],
            [p.journey_id for p in pts],
            [p.t for p in pts],
            [p.pos.lat_deg for p in pts],
            [p.pos.lon_deg for p in pts],
            [p.speed for p in pts],
            [p.heading for p in pts],
            [int(p.ignition) for p in pts],
        )

    @classmethod
    def concat(cls, tables: Sequence[PointTable]) -> PointTable:
        if not tables:
            return cls.empty()
        return cls(*(np.concatenate([getattr(tb, name) for tb in tables]) for name in cls.__slots__))

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.take(np.arange(len(self))[i])
        return TrajectoryPoint(
            point_id=self.point_id[i],
            journey_id=self.journey_id[i],
            t=float(self.t[i]),
            pos=GeoPoint.from_degrees(float(self.lat[i]), float(self.lon[i])),
            speed=float(self.speed[i]),
            heading=float(self.heading[i]),
            ignition=Ignition(int(self.ignition[i])),
        )

    def take(self, idx) -> PointTable:
        return PointTable(*(getattr(self, name)[idx] for name in self.__slots__))

    @property
    def lat_rad(self) -> np.ndarray:
        return np.radians(self.lat)

    @property
    def lon_rad(self) -> np.ndarray:
        return np.radians(self.lon)


@dataclass
class Trajectory:
    journey_id: str
    points: PointTable

    def __len__(self) -> int:
        return len(self.points)


class JourneySet(Sequence):
    """Journeys stored back to back in one table sorted by (journey_id, t)."""

    def __init__(self, table: PointTable, offsets: np.ndarray):
        self.table = table
        self.offsets = np.asarray(offsets, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def __getitem__(self, k) -> Trajectory:
        if isinstance(k, slice):
            return [self[j] for j in range(*k.indices(len(self)))]
        if k < 0:
            k += len(self)
        lo, hi = self.offsets[k], self.offsets[k + 1]
        sub = self.table.take(slice(lo, hi))
        return Trajectory(sub.journey_id[0], sub)

    def journey_index(self) -> np.ndarray:
        """Per-row journey ordinal."""
        return np.repeat(np.arange(len(self)), np.diff(self.offsets))


# -- parsing ----------------------------------------------------------------

def _parse_time(text: str) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_time(t: float) -> str:
    dt = datetime.fromtimestamp(t, tz=timezone.utc)
    if t != math.floor(t):
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def _header_map(header: list[str]) -> list[int]:
    names = [h.strip().lower() for h in header]
    missing = [c for c in COLUMNS if c not in names]
    if missing:
        raise IngestError(f"header lacks columns: {', '.join(missing)}")
    return [names.index(c) for c in COLUMNS]


def iter_records(stream: Iterable[str], config: IngestConfig | None = None,
                 diagnostics: IngestDiagnostics | None = None) -> Iterator[tuple]:
    """Yield validated raw tuples ``(pid, jid, t, lat, lon, speed_ms, heading, ignition)``."""
    config = config or IngestConfig()
    diag = diagnostics if diagnostics is not None else IngestDiagnostics()
    factor = config.speed_factor
    reader = csv.reader(stream, delimiter=config.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        return
    order = _header_map(header)
    width = len(header)
    for row in reader:
        if not row:
            continue
        diag.rows_read += 1
        line = reader.line_num
        if len(row) != width:
            diag.record_error(MalformedRow(line, f"expected {width} fields, got {len(row)}"))
            continue
        pid, jid, ts, lat_s, lon_s, spd_s, hdg_s, ign_s = (row[i] for i in order)
        try:
            t = _parse_time(ts)
            lat = float(lat_s)
            lon = float(lon_s)
            speed = float(spd_s) * factor
            heading = float(hdg_s)
            ign = Ignition.parse(ign_s)
        except (ValueError, KeyError) as exc:
            diag.record_error(MalformedRow(line, f"unparseable field ({exc})"))
            continue
        if not pid.strip() or not jid.strip():
            diag.record_error(MalformedRow(line, "empty identifier"))
        elif not (math.isfinite(t) and -90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            diag.record_error(MalformedRow(line, "coordinate or timestamp out of range"))
        elif not (speed >= 0.0 and math.isfinite(speed)):
            diag.record_error(MalformedRow(line, "negative or non-finite speed"))
        elif not 0.0 <= heading <= 360.0:
            diag.record_error(MalformedRow(line, "heading outside [0, 360]"))
        else:
            diag.parsed += 1
            yield pid.strip(), jid.strip(), t, lat, lon, speed, heading % 360.0, int(ign)


def parse_records(stream: Iterable[str], config: IngestConfig | None = None,
                  diagnostics: IngestDiagnostics | None = None) -> PointTable:
    """Parse delimiter-separated records into a :class:`PointTable`.

    Malformed rows are skipped and counted on ``diagnostics``; a header
    missing required columns raises :class:`IngestError`.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    cols = list(zip(*iter_records(stream, config, diagnostics)))
    if not cols:
        return PointTable.empty()
    return PointTable(*cols)


def serialize_records(points: PointTable, stream, config: IngestConfig | None = None) -> None:
    config = config or IngestConfig()
    factor = config.speed_factor
    writer = csv.writer(stream, delimiter=config.delimiter, lineterminator="\n")
    writer.writerow(COLUMNS)
    for i in range(len(points)):
        writer.writerow((
            points.point_id[i],
            points.journey_id[i],
            format_time(float(points.t[i])),
            f"{points.lat[i]:.6f}",
            f"{points.lon[i]:.6f}",
            f"{points.speed[i] / factor:.4f}",
            f"{points.heading[i]:.2f}",
            Ignition(int(points.ignition[i])).label,
        ))


# -- journeys ---------------------------------------------------------------

def _factorize(values: np.ndarray) -> tuple[np.ndarray, list]:
    """Codes ranking each value within the sorted unique values."""
    first: dict = {}
    raw = np.fromiter((first.setdefault(v, len(first)) for v in values), dtype=np.int64, count=len(values))
    uniques = list(first)
    rank = np.empty(len(uniques), dtype=np.int64)
    rank[sorted(range(len(uniques)), key=uniques.__getitem__)] = np.arange(len(uniques))
    return rank[raw] if len(values) else raw, sorted(uniques)


def assemble_journeys(points: PointTable, diagnostics: IngestDiagnostics | None = None) -> JourneySet:
    """Group by journey, order by time, drop repeated (journey, t) fixes.

    The first occurrence in input order of a duplicated timestamp is kept.
    """
    if len(points) == 0:
        return JourneySet(PointTable.empty(), np.zeros(1, dtype=np.int64))
    codes, _ = _factorize(points.journey_id)
    order = np.lexsort((np.arange(len(points)), points.t, codes))
    codes = codes[order]
    t = points.t[order]
    dup = np.zeros(len(order), dtype=bool)
    dup[1:] = (codes[1:] == codes[:-1]) & (t[1:] == t[:-1])
    if diagnostics is not None:
        diagnostics.duplicates += int(dup.sum())
    keep = order[~dup]
    codes = codes[~dup]
    starts = np.flatnonzero(np.r_[True, codes[1:] != codes[:-1]])
    return JourneySet(points.take(keep), np.r_[starts, len(keep)])


def _drift_mask(lat, lon, t, max_speed: float) -> np.ndarray:
    """Sequential implied-speed gate against the previous retained fix."""
    keep = np.ones(len(t), dtype=bool)
    last = 0
    p_last = GeoPoint.from_degrees(lat[0], lon[0])
    for i in range(1, len(t)):
        p = GeoPoint.from_degrees(lat[i], lon[i])
        dt = t[i] - t[last]
        if haversine_distance(p_last, p) > max_speed * dt:
            keep[i] = False
        else:
            last = i
            p_last = p
    return keep


def filter_gps_drift(traj: Trajectory, max_implied_speed: float = 75.0) -> Trajectory:
    """Drop fixes whose implied speed from the previous kept fix is too high."""
    pts = traj.points
    if len(pts) < 2:
        return traj
    keep = _drift_mask(pts.lat, pts.lon, pts.t, max_implied_speed)
    return Trajectory(traj.journey_id, pts.take(keep))


def filter_journeys(journeys: JourneySet, max_implied_speed: float = 75.0,
                    diagnostics: IngestDiagnostics | None = None) -> JourneySet:
    """Apply :func:`filter_gps_drift` to every journey.

    Journeys with no offending consecutive pair are passed through without
    the per-point loop.
    """
    tb = journeys.table
    n = len(tb)
    if n < 2:
        return journeys
    jidx = journeys.journey_index()
    lat, lon = tb.lat_rad, tb.lon_rad
    step = haversine_arrays(lat[:-1], lon[:-1], lat[1:], lon[1:])
    same = jidx[1:] == jidx[:-1]
    bad = same & (step > max_implied_speed * (tb.t[1:] - tb.t[:-1]))
    keep = np.ones(n, dtype=bool)
    for k in np.unique(jidx[1:][bad]):
        lo, hi = journeys.offsets[k], journeys.offsets[k + 1]
        keep[lo:hi] = _drift_mask(tb.lat[lo:hi], tb.lon[lo:hi], tb.t[lo:hi], max_implied_speed)
    if keep.all():
        return journeys
    if diagnostics is not None:
        diagnostics.drift_dropped += int((~keep).sum())
    kept_j = jidx[keep]
    counts = np.bincount(kept_j, minlength=len(journeys))
    return JourneySet(tb.take(keep), np.r_[0, np.cumsum(counts)])
