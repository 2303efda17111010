"""Spherical-earth geodesy: distances, bearings, forward projection and
intersecting radials.

Angles on :class:`GeoPoint` are radians; bearings are degrees clockwise from
true north in ``[0, 360)``; distances are meters on a sphere of radius
:data:`EARTH_RADIUS_M`.  Every scalar routine has a numpy counterpart
(suffix ``_arrays``) taking radian arrays, used by the batch stages.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_M = 6_371_000.0

# An origin closer than this (meters) to the other radial's great circle counts
# as lying on it; below ~1 mm the crossing is set by rounding noise in the angles.
ON_CIRCLE_EPS_M = 1e-3


class CoincidentPointsError(ValueError):
    """Bearing requested between two identical points."""


def _wrap_lon(lon: float) -> float:
    """Normalize a longitude in radians to (-pi, pi]."""
    wrapped = math.remainder(lon, 2.0 * math.pi)
    if wrapped == -math.pi:
        wrapped = math.pi
    return wrapped


def normalize_bearing(deg: float) -> float:
    b = deg % 360.0
    return 0.0 if b == 360.0 else b


@dataclass(frozen=True)
class GeoPoint:
    """A position on the sphere, in radians."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (-math.pi / 2 <= self.lat <= math.pi / 2) or not math.isfinite(self.lon):
            raise ValueError(f"invalid coordinates: lat={self.lat!r} lon={self.lon!r}")
        object.__setattr__(self, "lon", _wrap_lon(self.lon))

    @classmethod
    def from_degrees(cls, lat: float, lon: float) -> GeoPoint:
        return cls(math.radians(lat), math.radians(lon))

    @property
    def lat_deg(self) -> float:
        return math.degrees(self.lat)

    @property
    def lon_deg(self) -> float:
        return math.degrees(self.lon)


@dataclass(frozen=True)
class RadialIntersection:
    point: GeoPoint
    d13: float
    d23: float


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters."""
    dlat = b.lat - a.lat
    dlon = b.lon - a.lon
    h = math.sin(dlat / 2) ** 2 + math.cos(a.lat) * math.cos(b.lat) * math.sin(dlon / 2) ** 2
    h = min(max(h, 0.0), 1.0)
    return 2.0 * EARTH_RADIUS_M * math.atan2(math.sqrt(h), math.sqrt(1.0 - h))


def initial_bearing(a: GeoPoint, b: GeoPoint) -> float:
    """Forward azimuth in degrees of the great circle from ``a`` to ``b``."""
    if a == b or haversine_distance(a, b) == 0.0:
        raise CoincidentPointsError("bearing undefined between coincident points")
    dlon = b.lon - a.lon
    y = math.sin(dlon) * math.cos(b.lat)
    x = math.cos(a.lat) * math.sin(b.lat) - math.sin(a.lat) * math.cos(b.lat) * math.cos(dlon)
    return normalize_bearing(math.degrees(math.atan2(y, x)))


def destination_point(a: GeoPoint, bearing: float, distance: float) -> GeoPoint:
    """Point reached from ``a`` after ``distance`` meters on initial ``bearing``."""
    if distance < 0:
        raise ValueError("distance must be non-negative")
    delta = distance / EARTH_RADIUS_M
    theta = math.radians(bearing)
    sin_lat = math.sin(a.lat) * math.cos(delta) + math.cos(a.lat) * math.sin(delta) * math.cos(theta)
    lat = math.asin(min(max(sin_lat, -1.0), 1.0))
    lon = a.lon + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(a.lat),
        math.cos(delta) - math.sin(a.lat) * math.sin(lat),
    )
    return GeoPoint(lat, lon)


def intersect_radials(p1: GeoPoint, b1: float, p2: GeoPoint, b2: float) -> RadialIntersection | None:
    """Intersection of two radials (origin + bearing) lying ahead of both.

    Returns ``None`` when the origins coincide, the great circles coincide,
    either origin lies within 1 mm of the other great circle, or the
    crossing is ahead of one radial but behind the other.  Range pruning is
    left to callers, so a returned point may be thousands of kilometres away.
    """
    out = intersect_radials_arrays(
        np.array([p1.lat]), np.array([p1.lon]), np.array([b1], dtype=float),
        np.array([p2.lat]), np.array([p2.lon]), np.array([b2], dtype=float),
    )
    lat3, lon3, d13, d23, ok = (v[0] for v in out)
    if not ok:
        return None
    return RadialIntersection(GeoPoint(float(lat3), float(lon3)), float(d13), float(d23))


# -- vectorized -------------------------------------------------------------

def haversine_arrays(lat1, lon1, lat2, lon2):
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    h = np.clip(h, 0.0, 1.0)
    return 2.0 * EARTH_RADIUS_M * np.arctan2(np.sqrt(h), np.sqrt(1.0 - h))


def bearing_arrays(lat1, lon1, lat2, lon2):
    """Initial bearing in degrees; coincident pairs yield 0."""
    dlon = lon2 - lon1
    y = np.sin(dlon) * np.cos(lat2)
    x = np.cos(lat1) * np.sin(lat2) - np.sin(lat1) * np.cos(lat2) * np.cos(dlon)
    deg = np.degrees(np.arctan2(y, x)) % 360.0
    return np.where(deg == 360.0, 0.0, deg)


def destination_arrays(lat, lon, bearing_deg, distance):
    delta = np.asarray(distance, dtype=float) / EARTH_RADIUS_M
    theta = np.radians(bearing_deg)
    lat2 = np.arcsin(np.clip(np.sin(lat) * np.cos(delta) + np.cos(lat) * np.sin(delta) * np.cos(theta), -1, 1))
    lon2 = lon + np.arctan2(np.sin(theta) * np.sin(delta) * np.cos(lat), np.cos(delta) - np.sin(lat) * np.sin(lat2))
    return lat2, wrap_lon_arrays(lon2)


def wrap_lon_arrays(lon):
    wrapped = np.remainder(lon + np.pi, 2 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def unit_vectors(lat, lon):
    """Earth-centred unit vectors, shape ``(n, 3)``."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    cl = np.cos(lat)
    return np.column_stack((cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)))


def chord_length(distance_m):
    """Straight-line chord (meters) subtending a great-circle arc of ``distance_m``."""
    return 2.0 * EARTH_RADIUS_M * np.sin(np.asarray(distance_m, dtype=float) / (2.0 * EARTH_RADIUS_M))


def intersect_radials_arrays(lat1, lon1, b1, lat2, lon2, b2):
    """Vectorized :func:`intersect_radials`.

    Returns ``(lat3, lon3, d13, d23, ok)``; rows with ``ok`` false hold NaN.
    """
    lat1, lon1, b1, lat2, lon2, b2 = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (lat1, lon1, b1, lat2, lon2, b2))
    )
    dst12 = haversine_arrays(lat1, lon1, lat2, lon2) / EARTH_RADIUS_M
    crs12 = np.radians(bearing_arrays(lat1, lon1, lat2, lon2))
    crs21 = np.radians(bearing_arrays(lat2, lon2, lat1, lon1))
    crs13 = np.radians(b1)
    crs23 = np.radians(b2)

    ang1 = np.remainder(crs13 - crs12 + np.pi, 2 * np.pi) - np.pi
    ang2 = np.remainder(crs21 - crs23 + np.pi, 2 * np.pi) - np.pi
    s1 = np.sin(ang1)
    s2 = np.sin(ang2)
    # cross-track offset of each origin from the other great circle
    off = np.abs(np.sin(dst12)) * EARTH_RADIUS_M
    ok = (dst12 > 0) & (np.abs(s1) * off > ON_CIRCLE_EPS_M) & (np.abs(s2) * off > ON_CIRCLE_EPS_M) & (s1 * s2 > 0)

    a1 = np.abs(ang1)
    a2 = np.abs(ang2)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_a3 = -np.cos(a1) * np.cos(a2) + np.sin(a1) * np.sin(a2) * np.cos(dst12)
        a3 = np.arccos(np.clip(cos_a3, -1.0, 1.0))
        num = np.sin(dst12) * np.sin(a1) * np.sin(a2)
        dst13 = np.arctan2(num, np.cos(a2) + np.cos(a1) * np.cos(a3))
        dst23 = np.arctan2(num, np.cos(a1) + np.cos(a2) * np.cos(a3))
        lat3 = np.arcsin(np.clip(np.sin(lat1) * np.cos(dst13) + np.cos(lat1) * np.sin(dst13) * np.cos(crs13), -1, 1))
        dlon = np.arctan2(np.sin(crs13) * np.sin(dst13) * np.cos(lat1), np.cos(dst13) - np.sin(lat1) * np.sin(lat3))
        # East-positive longitudes: the crossing lies east of p1 when sin(crs13) > 0.
        lon3 = wrap_lon_arrays(lon1 + dlon)
    ok &= np.isfinite(dst13) & np.isfinite(dst23) & (dst13 >= 0) & (dst23 >= 0)
    nan = np.nan
    return (
        np.where(ok, lat3, nan),
        np.where(ok, lon3, nan),
        np.where(ok, dst13 * EARTH_RADIUS_M, nan),
        np.where(ok, dst23 * EARTH_RADIUS_M, nan),
        ok,
    )
