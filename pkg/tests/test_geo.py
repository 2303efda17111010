from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nearcrash.geo import (
    EARTH_RADIUS_M,
    CoincidentPointsError,
    GeoPoint,
    destination_point,
    haversine_arrays,
    haversine_distance,
    initial_bearing,
    intersect_radials,
    intersect_radials_arrays,
    normalize_bearing,
)
from nearcrash.simgen import stepping_intersection

from oracles import hav, planar_ttc

P = GeoPoint.from_degrees
DEG_M = EARTH_RADIUS_M * math.pi / 180.0  # 111 194.93 m

lats = st.floats(-80, 80)
lons = st.floats(-179.9, 179.9)
bearings = st.floats(0, 359.999)


def test_haversine_identity_and_one_degree():
    assert haversine_distance(P(0, 0), P(0, 0)) == 0.0
    assert haversine_distance(P(0, 0), P(0, 1)) == pytest.approx(111_194.93, abs=0.01)


def test_bearing_cardinal():
    assert initial_bearing(P(0, 0), P(1, 0)) == pytest.approx(0.0, abs=1e-12)
    assert initial_bearing(P(0, 0), P(0, 1)) == pytest.approx(90.0, abs=1e-12)


def test_bearing_coincident_raises():
    with pytest.raises(CoincidentPointsError):
        initial_bearing(P(10, 10), P(10, 10))


def test_equatorial_reverse_bearing():
    fwd = initial_bearing(P(0, 0), P(0, 3))
    back = initial_bearing(P(0, 3), P(0, 0))
    assert (back - fwd) % 360 == pytest.approx(180.0)


def test_destination_inverts_haversine_example():
    q = destination_point(P(0, 0), 90.0, DEG_M)
    assert abs(q.lat) < 1e-9
    assert abs(q.lon - math.radians(1.0)) < 1e-9


def test_destination_zero_distance():
    p = P(12.5, -40.25)
    q = destination_point(p, 123.0, 0.0)
    assert q.lat == pytest.approx(p.lat, abs=1e-15)
    assert q.lon == pytest.approx(p.lon, abs=1e-15)


def test_destination_negative_distance():
    with pytest.raises(ValueError):
        destination_point(P(0, 0), 0.0, -1.0)


def test_normalize_bearing():
    assert normalize_bearing(-90.0) == 270.0
    assert normalize_bearing(720.0) == 0.0
    assert 0.0 <= normalize_bearing(-1e-18) < 360.0


def test_geopoint_rejects_bad_latitude():
    with pytest.raises(ValueError):
        GeoPoint(2.0, 0.0)


@given(lats, lons, lats, lons)
def test_haversine_matches_oracle_and_is_symmetric(la1, lo1, la2, lo2):
    a, b = P(la1, lo1), P(la2, lo2)
    d = haversine_distance(a, b)
    assert d == pytest.approx(haversine_distance(b, a), abs=1e-6)
    assert d == pytest.approx(float(hav(la1, lo1, la2, lo2)), rel=1e-9, abs=1e-6)
    assert 0.0 <= d <= math.pi * EARTH_RADIUS_M + 1e-6


@given(lats, lons, bearings, st.floats(1.0, 2_000_000))
def test_destination_round_trip(la, lo, b, d):
    p = P(la, lo)
    q = destination_point(p, b, d)
    assert haversine_distance(p, q) == pytest.approx(d, rel=1e-9, abs=1e-6)


class TestIntersectRadials:
    def test_crossing_example(self):
        # The closed-form d23 is the 1-degree arc along the 1E meridian.
        hit = intersect_radials(P(0, 0), 90.0, P(1, 1), 180.0)
        assert hit.point.lat_deg == pytest.approx(0.0, abs=1e-9)
        assert hit.point.lon_deg == pytest.approx(1.0, abs=1e-9)
        assert hit.d13 == pytest.approx(111_195, abs=1)
        assert hit.d23 == pytest.approx(111_194.93, abs=0.01)
        ref = stepping_intersection(P(0, 0), 90.0, P(1, 1), 180.0)
        assert hit.d13 == pytest.approx(ref[1], abs=1.0)
        assert hit.d23 == pytest.approx(ref[2], abs=1.0)

    def test_parallel_meridians_meet_at_pole(self):
        hit = intersect_radials(P(0, 0), 0.0, P(0, 1), 0.0)
        assert hit is not None
        assert hit.point.lat_deg == pytest.approx(90.0, abs=1e-9)
        assert hit.d13 == pytest.approx(EARTH_RADIUS_M * math.pi / 2, abs=1e-3)
        assert hit.d23 == pytest.approx(hit.d13, abs=1e-3)

    def test_collinear_same_course_is_degenerate(self):
        assert intersect_radials(P(0, 0), 90.0, P(0, 0.0005), 90.0) is None

    def test_coincident_origins(self):
        assert intersect_radials(P(5, 5), 10.0, P(5, 5), 80.0) is None

    def test_back_to_back_diverging(self):
        assert intersect_radials(P(0, 0), 180.0, P(0.001, 0), 0.0) is None

    def test_origin_on_other_course_is_degenerate(self):
        # b sits on a's course line; the crossing is b itself and d13 is 0/0 noise
        a = P(0.0, 15.0)
        assert intersect_radials(a, 1.0, destination_point(a, 1.0, 47.0), 0.0) is None
        a = P(-41.3, 120.8)
        assert intersect_radials(a, 135.5663, destination_point(a, 135.5663, 591.46), 316.0) is None

    def test_origin_just_off_other_course_matches_oracle(self):
        a = P(12.0, -40.0)
        b = destination_point(destination_point(a, 75.0, 400.0), 165.0, 0.01)
        hit = intersect_radials(a, 75.0, b, 256.0)
        _, s1, s2 = stepping_intersection(a, 75.0, b, 256.0)
        assert hit.d13 == pytest.approx(s1, abs=0.01)
        assert hit.d23 == pytest.approx(s2, abs=0.01)

    def test_perpendicular_junction(self):
        junction = P(29.5, -98.5)
        a = destination_point(junction, 270.0, 40.0)  # west, driving east
        b = destination_point(junction, 0.0, 25.0)  # north, driving south
        hit = intersect_radials(a, 90.0, b, 180.0)
        assert haversine_distance(hit.point, junction) < 1.0
        assert hit.d13 == pytest.approx(40.0, abs=1.0)
        assert hit.d23 == pytest.approx(25.0, abs=1.0)

    def test_parallel_courses_50m_apart_have_no_near_crossing(self):
        a = P(29.5, -98.5)
        b = destination_point(a, 90.0, 50.0)
        hit = intersect_radials(a, 0.0, b, 0.0)
        # only the far crossing near the pole remains; range pruning happens upstream
        assert hit is None or hit.d13 > 1_000_000

    def test_arrays_agree_with_scalar(self):
        r = np.random.default_rng(3)
        n = 200
        lat1, lon1 = r.uniform(-60, 60, n), r.uniform(-170, 170, n)
        b1, b2 = r.uniform(0, 360, n), r.uniform(0, 360, n)
        lat2, lon2 = lat1 + r.uniform(-0.01, 0.01, n), lon1 + r.uniform(-0.01, 0.01, n)
        out = intersect_radials_arrays(np.radians(lat1), np.radians(lon1), b1, np.radians(lat2), np.radians(lon2), b2)
        for k in range(n):
            hit = intersect_radials(P(lat1[k], lon1[k]), b1[k], P(lat2[k], lon2[k]), b2[k])
            assert bool(out[4][k]) == (hit is not None)
            if hit is not None:
                assert out[2][k] == pytest.approx(hit.d13)
                assert out[3][k] == pytest.approx(hit.d23)

    @given(lats, lons, bearings, bearings, st.floats(20, 500), bearings)
    def test_local_agreement_with_planar_oracle(self, la, lo, ha, hb, sep, direction):
        # short-range crossings should look planar to well under a meter
        a = P(la, lo)
        b = destination_point(a, direction, sep)
        hit = intersect_radials(a, ha, b, hb)
        flat = planar_ttc(la, lo, ha, 1.0, b.lat_deg, b.lon_deg, hb, 1.0)
        if hit is None or flat is None or max(flat) > 2_000 or hit.d13 > 2_000:
            return
        assert hit.d13 == pytest.approx(flat[0], abs=0.5 + 1e-3 * flat[0])
        assert hit.d23 == pytest.approx(flat[1], abs=0.5 + 1e-3 * flat[1])

    @given(lats, lons, bearings, bearings, st.floats(5, 1000), bearings)
    def test_symmetry_under_swap(self, la, lo, ha, hb, sep, direction):
        a = P(la, lo)
        b = destination_point(a, direction, sep)
        h1 = intersect_radials(a, ha, b, hb)
        h2 = intersect_radials(b, hb, a, ha)
        assert (h1 is None) == (h2 is None)
        if h1 is not None and max(h1.d13, h1.d23) <= 100_000:
            assert h1.d13 == pytest.approx(h2.d23, rel=1e-9, abs=1e-6)
            assert h1.d23 == pytest.approx(h2.d13, rel=1e-9, abs=1e-6)

    @given(lats, lons, bearings, bearings, st.floats(5, 1000), bearings)
    def test_point_lies_on_both_radials(self, la, lo, ha, hb, sep, direction):
        a = P(la, lo)
        b = destination_point(a, direction, sep)
        hit = intersect_radials(a, ha, b, hb)
        # grazing crossings thousands of km out are ill-conditioned along track
        if hit is None or max(hit.d13, hit.d23) > 100_000:
            return
        assert haversine_distance(destination_point(a, ha, hit.d13), hit.point) < 1e-2
        assert haversine_distance(destination_point(b, hb, hit.d23), hit.point) < 1e-2


def test_haversine_arrays_broadcast():
    d = haversine_arrays(np.radians([0.0, 0.0]), 0.0, 0.0, np.radians([0.0, 1.0]))
    assert d[0] == 0.0
    assert d[1] == pytest.approx(111_194.93, abs=0.01)
