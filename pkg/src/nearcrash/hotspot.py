"""Getis-Ord Gi* hot and cold spots over inverse-distance weights, and the
workday/holiday x time-of-day partitioning of events."""
from __future__ import annotations

import csv
import enum
import math
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone, tzinfo
from zoneinfo import ZoneInfo

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .geo import EARTH_RADIUS_M, GeoPoint, chord_length, haversine_arrays, unit_vectors

MILE_M = 1609.344

# -- time partitions --------------------------------------------------------


class DayClass(str, enum.Enum):
    WORKDAY = "Workday"
    HOLIDAY = "Holiday"


class Period(str, enum.Enum):
    MORNING_PEAK = "MorningPeak"
    DAYTIME = "Daytime"
    EVENING_PEAK = "EveningPeak"
    NIGHTTIME = "Nighttime"


@dataclass(frozen=True, order=True)
class PeriodPartition:
    day_class: DayClass
    period: Period

    @property
    def label(self) -> str:
        return f"{self.day_class.value}_{self.period.value}"


ALL_PARTITIONS = tuple(PeriodPartition(d, p) for d in DayClass for p in Period)
ALL_TIME = "AllTime"

DEFAULT_HOLIDAYS = (date(2021, 11, 11), date(2021, 11, 25), date(2021, 11, 26))


class HolidayCalendar:
    """Weekends plus an explicit list of public holidays."""

    def __init__(self, holidays: Iterable[date | str] = DEFAULT_HOLIDAYS):
        self.holidays = frozenset(d if isinstance(d, date) else date.fromisoformat(d.strip()) for d in holidays)

    def is_holiday(self, d: date) -> bool:
        return d.weekday() >= 5 or d in self.holidays

    @classmethod
    def from_file(cls, path) -> HolidayCalendar:
        with open(path, encoding="utf-8") as fh:
            return cls(line.split("#")[0] for line in fh if line.split("#")[0].strip())


_OFFSET = re.compile(r"^(?:UTC)?([+-])(\d{1,2})(?::?(\d{2}))?$")


def resolve_timezone(spec: str | float | tzinfo | None) -> tzinfo:
    """``UTC``, a fixed offset such as ``-06:00`` / ``-6``, or an IANA zone name."""
    if spec is None:
        return timezone.utc
    if isinstance(spec, tzinfo):
        return spec
    if isinstance(spec, (int, float)):
        return timezone(timedelta(hours=float(spec)))
    text = str(spec).strip()
    if text.upper() in ("UTC", "Z", ""):
        return timezone.utc
    m = _OFFSET.match(text)
    if m:
        sign = -1 if m.group(1) == "-" else 1
        return timezone(sign * timedelta(hours=int(m.group(2)), minutes=int(m.group(3) or 0)))
    return ZoneInfo(text)


def period_of(hour: int) -> Period:
    if 6 <= hour < 10:
        return Period.MORNING_PEAK
    if 10 <= hour < 16:
        return Period.DAYTIME
    if 16 <= hour < 20:
        return Period.EVENING_PEAK
    return Period.NIGHTTIME


def partition_of(t: float | datetime, calendar: HolidayCalendar, tz: tzinfo = timezone.utc) -> PeriodPartition:
    """Partition of an instant (epoch seconds or aware datetime) in local time ``tz``."""
    dt = t if isinstance(t, datetime) else datetime.fromtimestamp(t, tz=timezone.utc)
    local = dt.astimezone(tz)
    day = DayClass.HOLIDAY if calendar.is_holiday(local.date()) else DayClass.WORKDAY
    return PeriodPartition(day, period_of(local.hour))


def partition_periods(events: Sequence, calendar: HolidayCalendar, tz: tzinfo = timezone.utc) -> dict:
    """Events grouped into all eight partitions by local ``event_time``."""
    out: dict[PeriodPartition, list] = {p: [] for p in ALL_PARTITIONS}
    for ev in events:
        out[partition_of(ev.event_time, calendar, tz)].append(ev)
    return out


# -- Gi* --------------------------------------------------------------------


class GiClass(str, enum.Enum):
    HOT99 = "Hot99"
    HOT95 = "Hot95"
    HOT90 = "Hot90"
    NOT_SIGNIFICANT = "NotSignificant"
    COLD90 = "Cold90"
    COLD95 = "Cold95"
    COLD99 = "Cold99"


Z90, Z95, Z99 = 1.644854, 1.959964, 2.575829


def classify(z: float) -> GiClass:
    if not math.isfinite(z):
        return GiClass.NOT_SIGNIFICANT
    if z >= Z99:
        return GiClass.HOT99
    if z >= Z95:
        return GiClass.HOT95
    if z >= Z90:
        return GiClass.HOT90
    if z <= -Z99:
        return GiClass.COLD99
    if z <= -Z95:
        return GiClass.COLD95
    if z <= -Z90:
        return GiClass.COLD90
    return GiClass.NOT_SIGNIFICANT


@dataclass(frozen=True)
class SpatialUnit:
    unit_id: str
    representative_point: GeoPoint
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ValueError(f"unit {self.unit_id}: value must be finite and non-negative")


@dataclass(frozen=True)
class GiStarResult:
    unit_id: str
    value: float
    gi_star: float
    classification: GiClass


def build_weights(units: Sequence[SpatialUnit], cutoff: float = MILE_M, d_floor: float = 100.0,
                  self_weight: float | None = None) -> sparse.csr_matrix:
    """Inverse-distance weights ``1 / max(d, d_floor)`` within ``cutoff``.

    Parameters
    ----------
    units : sequence of SpatialUnit
    cutoff : float
        Neighbours farther than this (meters) get zero weight.
    d_floor : float
        Distance floor; also sets the default self weight ``1 / d_floor``.
    self_weight : float, optional
        Explicit diagonal weight overriding the floor rule.

    Returns
    -------
    scipy.sparse.csr_matrix
        Symmetric ``(n, n)`` weights.
    """
    n = len(units)
    lat = np.array([u.representative_point.lat for u in units], dtype=float)
    lon = np.array([u.representative_point.lon for u in units], dtype=float)
    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [np.full(n, 1.0 / d_floor if self_weight is None else float(self_weight))]
    if n > 1:
        tree = cKDTree(unit_vectors(lat, lon) * EARTH_RADIUS_M)
        pairs = tree.query_pairs(float(chord_length(cutoff)) * (1 + 1e-9) + 1e-6, output_type="ndarray")
        if len(pairs):
            i, j = pairs[:, 0], pairs[:, 1]
            d = haversine_arrays(lat[i], lon[i], lat[j], lon[j])
            keep = d <= cutoff
            i, j, d = i[keep], j[keep], d[keep]
            w = 1.0 / np.maximum(d, d_floor)
            rows += [i, j]
            cols += [j, i]
            vals += [w, w]
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def gi_star_values(x: np.ndarray, weights, variant: str = "standard") -> np.ndarray:
    """Gi* z-scores; zero everywhere when the values have no spread.

    ``variant="as_printed"`` drops the factor ``n`` on the sum of squared
    weights inside the radical; the radicand is then usually negative and the
    statistic NaN, which is kept visible rather than patched.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 2:
        return np.zeros(n)
    W = sparse.csr_matrix(weights)
    mean = x.mean()
    s = math.sqrt(max(float(np.mean(x * x) - mean * mean), 0.0))
    if s == 0.0 or np.ptp(x) == 0:
        return np.zeros(n)
    wsum = np.asarray(W.sum(axis=1)).ravel()
    w2sum = np.asarray(W.multiply(W).sum(axis=1)).ravel()
    num = W @ x - mean * wsum
    if variant == "standard":
        rad = (n * w2sum - wsum ** 2) / (n - 1)
    elif variant == "as_printed":
        rad = (w2sum - wsum ** 2) / (n - 1)
    else:
        raise ValueError(f"unknown Gi* variant {variant!r}")
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / (s * np.sqrt(rad))


def gi_star(units: Sequence[SpatialUnit], weights, variant: str = "standard") -> list[GiStarResult]:
    x = np.array([u.value for u in units], dtype=float)
    z = gi_star_values(x, weights, variant)
    return [GiStarResult(u.unit_id, u.value, float(zi), classify(float(zi))) for u, zi in zip(units, z)]


# -- zones ------------------------------------------------------------------

def spherical_mean(points: Sequence[GeoPoint]) -> GeoPoint:
    v = unit_vectors([p.lat for p in points], [p.lon for p in points]).sum(axis=0)
    v /= np.linalg.norm(v)
    return GeoPoint(math.asin(max(-1.0, min(1.0, v[2]))), math.atan2(v[1], v[0]))


def aggregate_zones(summaries: Sequence, zone_of: Mapping[str, str], points: Mapping[str, GeoPoint],
                    value: str = "ratio") -> list[SpatialUnit]:
    """Zone-level units from segment summaries.

    Zone value is the event-weighted mean segment risk ratio (``"ratio"``) or
    the total event count (``"count"``); the zone point is the spherical mean
    of its segments' representative points.
    """
    members: dict[str, list] = {}
    for s in summaries:
        z = zone_of.get(s.segment_id)
        if z is not None:
            members.setdefault(z, []).append(s)
    units = []
    for z in sorted(members):
        segs = members[z]
        events = sum(s.event_count for s in segs)
        if value == "count":
            v = float(events)
        elif value == "ratio":
            v = sum(s.event_count * s.risk_ratio for s in segs) / events if events else 0.0
        else:
            raise ValueError(f"unknown zone value {value!r}")
        units.append(SpatialUnit(z, spherical_mean([points[s.segment_id] for s in segs]), v))
    return units


# -- output -----------------------------------------------------------------

TABLE_ROWS = (GiClass.COLD99, GiClass.COLD95, GiClass.COLD90, GiClass.NOT_SIGNIFICANT,
              GiClass.HOT90, GiClass.HOT95, GiClass.HOT99)


def format_cell(count: int, total: int) -> str:
    if count == 0 or total == 0:
        return f"{count} (0%)"
    return f"{count} ({100.0 * count / total:.2f}%)"


def partition_counts(results: Sequence[GiStarResult]) -> dict[GiClass, int]:
    counts = {c: 0 for c in TABLE_ROWS}
    for r in results:
        counts[r.classification] += 1
    return counts


def summarize_partitions(results_by_partition: Mapping[str, Sequence[GiStarResult]]) -> str:
    """Plain-text table: one column per partition, one row per confidence class."""
    labels = list(results_by_partition)
    counts = {lb: partition_counts(results_by_partition[lb]) for lb in labels}
    totals = {lb: len(results_by_partition[lb]) for lb in labels}
    width = max([16] + [len(lb) + 2 for lb in labels])
    lines = [f"{'Class':<16}" + "".join(f"{lb:>{width}}" for lb in labels)]
    for cls in TABLE_ROWS:
        lines.append(f"{cls.value:<16}" + "".join(f"{format_cell(counts[lb][cls], totals[lb]):>{width}}"
                                                  for lb in labels))
    lines.append(f"{'Total':<16}" + "".join(f"{totals[lb]:>{width}}" for lb in labels))
    return "\n".join(lines) + "\n"


def write_gi_csv(results: Sequence[GiStarResult], stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(("unit_id", "value", "gi_star", "classification"))
    for r in results:
        w.writerow((r.unit_id, f"{r.value:.6f}", f"{r.gi_star:.6f}", r.classification.value))


def read_gi_csv(stream) -> list[GiStarResult]:
    return [GiStarResult(r["unit_id"], float(r["value"]), float(r["gi_star"]), GiClass(r["classification"]))
            for r in csv.DictReader(stream)]
