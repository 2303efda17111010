from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nearcrash.geo import GeoPoint, destination_point
from nearcrash.index import PairFlagSet, build_index, emit_candidate_pairs, query_buffer
from nearcrash.ingest import PointTable

from oracles import brute_pairs

O = GeoPoint.from_degrees(29.4241, -98.4936)


def table(points):
    """points: (journey, t, GeoPoint) triples."""
    n = len(points)
    return PointTable([f"p{i}" for i in range(n)], [p[0] for p in points], [p[1] for p in points],
                      [p[2].lat_deg for p in points], [p[2].lon_deg for p in points],
                      np.full(n, 10.0), np.zeros(n), np.ones(n))


def random_table(rng, n, extent=1500.0, duration=120.0, journeys=40):
    north = rng.uniform(-extent / 2, extent / 2, n)
    east = rng.uniform(-extent / 2, extent / 2, n)
    lat = O.lat_deg + np.degrees(north / 6_371_000.0)
    lon = O.lon_deg + np.degrees(east / (6_371_000.0 * math.cos(O.lat)))
    t = 1.6e9 + rng.uniform(0, duration, n)
    j = rng.integers(0, journeys, n).astype(str).astype(object)
    return PointTable([f"p{i}" for i in range(n)], j, t, lat, lon, np.full(n, 10.0), np.zeros(n), np.ones(n))


def pair_set(arr):
    return {(int(a), int(b)) for a, b in arr}


def test_empty_index():
    idx = build_index(PointTable.empty())
    assert len(idx) == 0
    assert len(emit_candidate_pairs(idx)) == 0


def test_mutual_buffer_membership():
    b = destination_point(O, 37.0, 99.9)
    tb = table([("A", 0.0, O), ("B", 9.0, b)])
    idx = build_index(tb)
    assert [p.point_id for p in query_buffer(idx, tb[0])] == ["p1"]
    assert [p.point_id for p in query_buffer(idx, tb[1])] == ["p0"]


def test_boundary_distance_included():
    tb = table([("A", 0.0, O), ("B", 0.0, destination_point(O, 90.0, 100.0))])
    assert pair_set(emit_candidate_pairs(build_index(tb))) == {(0, 1)}


def test_boundary_time_included():
    tb = table([("A", 0.0, O), ("B", 10.0, O)])
    assert pair_set(emit_candidate_pairs(build_index(tb))) == {(0, 1)}


def test_outside_window_excluded():
    tb = table([("A", 0.0, O), ("B", 11.0, destination_point(O, 0.0, 50.0))])
    assert len(emit_candidate_pairs(build_index(tb))) == 0


def test_same_journey_excluded():
    tb = table([("A", 0.0, O), ("A", 3.0, destination_point(O, 0.0, 10.0))])
    idx = build_index(tb)
    assert query_buffer(idx, tb[0]) == []
    assert len(emit_candidate_pairs(idx)) == 0


def test_pair_emitted_once():
    tb = table([("A", 0.0, O), ("B", 1.0, destination_point(O, 0.0, 10.0))])
    assert emit_candidate_pairs(build_index(tb)).tolist() == [[0, 1]]


def test_three_way():
    tb = table([("A", 0.0, O), ("B", 1.0, destination_point(O, 0.0, 10.0)),
                ("C", 2.0, destination_point(O, 90.0, 10.0))])
    assert pair_set(emit_candidate_pairs(build_index(tb))) == {(0, 1), (0, 2), (1, 2)}


def test_flags_withhold_repeats():
    tb = table([("A", 0.0, O), ("B", 1.0, O)])
    idx = build_index(tb)
    flags = PairFlagSet()
    assert len(emit_candidate_pairs(idx, flags)) == 1
    assert len(emit_candidate_pairs(idx, flags)) == 0
    assert (1, 0) in flags


def test_flag_set_test_and_set():
    f = PairFlagSet(shards=3)
    assert f.test_and_set(5, 2)
    assert not f.test_and_set(2, 5)
    assert len(f) == 1


def test_thousand_points_match_brute_force(rng):
    tb = random_table(rng, 1000, extent=800.0)
    got = pair_set(emit_candidate_pairs(build_index(tb)))
    assert got == brute_pairs(tb.journey_id, tb.t, tb.lat, tb.lon)


def test_self_query_matches_brute_force(rng):
    tb = random_table(rng, 300, extent=500.0, duration=40.0)
    idx = build_index(tb)
    brute = brute_pairs(tb.journey_id, tb.t, tb.lat, tb.lon)
    for i in range(len(tb)):
        got = {int(p.point_id[1:]) for p in query_buffer(idx, tb[i])}
        want = {b for a, b in brute if a == i} | {a for a, b in brute if b == i}
        assert got == want


@pytest.mark.parametrize("time_slice", [1.0, 4.0, 10.0, 25.0])
def test_slice_width_does_not_change_pairs(rng, time_slice):
    tb = random_table(rng, 800, extent=600.0)
    base = pair_set(emit_candidate_pairs(build_index(tb, 10.0)))
    assert pair_set(emit_candidate_pairs(build_index(tb, time_slice))) == base


def test_workers_do_not_change_pairs(rng):
    tb = random_table(rng, 2000, extent=1000.0)
    a = emit_candidate_pairs(build_index(tb), workers=1)
    b = emit_candidate_pairs(build_index(tb, workers=4), workers=4)
    np.testing.assert_array_equal(a, b)


@given(st.integers(0, 2**32 - 1), st.floats(20, 300), st.floats(1, 30))
def test_arbitrary_thresholds_match_brute_force(seed, radius, window):
    tb = random_table(np.random.default_rng(seed), 150, extent=600.0, duration=60.0, journeys=8)
    got = pair_set(emit_candidate_pairs(build_index(tb), radius=radius, window=window))
    assert got == brute_pairs(tb.journey_id, tb.t, tb.lat, tb.lon, radius, window)
