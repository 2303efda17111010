from __future__ import annotations

import io
import math
from datetime import date, datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nearcrash.geo import GeoPoint, destination_point, haversine_distance
from nearcrash.hotspot import (
    ALL_PARTITIONS,
    MILE_M,
    DayClass,
    GiClass,
    HolidayCalendar,
    Period,
    PeriodPartition,
    SpatialUnit,
    aggregate_zones,
    build_weights,
    classify,
    format_cell,
    gi_star,
    gi_star_values,
    partition_of,
    partition_periods,
    read_gi_csv,
    resolve_timezone,
    spherical_mean,
    summarize_partitions,
    write_gi_csv,
)
from nearcrash.mapmatch import RiskClass, SegmentRiskSummary

from conftest import ORIGIN, grid_units
from oracles import gi_star_direct

# direct-formula oracle output for the 5 x 5 fixture (500 m spacing, 3 x 3 block of ones in the NW corner)
GRID_Z = np.array([
    [2.46594618, 2.48601496, 2.04131030, -0.35430505, -0.87767458],
    [2.48601495, 2.52145956, 1.97864433, -0.57529123, -1.09337904],
    [2.04131030, 1.97864433, 1.45383766, -1.00745864, -1.37732671],
    [-0.35430504, -0.57529121, -1.00745862, -1.53534872, -1.62010195],
    [-0.87767457, -1.09337901, -1.37732669, -1.62010193, -1.54465392],
])


def units_from(lat, lon, values):
    return [SpatialUnit(f"u{k:04d}", GeoPoint.from_degrees(a, b), float(v))
            for k, (a, b, v) in enumerate(zip(lat, lon, values))]


def grid_fixture():
    lat, lon = grid_units()
    x = np.array([1.0 if r < 3 and c < 3 else 0.0 for r in range(5) for c in range(5)])
    return lat, lon, x


class TestWeights:
    def test_half_mile(self):
        b = destination_point(ORIGIN, 90.0, MILE_M / 2)
        W = build_weights([SpatialUnit("a", ORIGIN, 0), SpatialUnit("b", b, 0)]).toarray()
        assert W[0, 1] == pytest.approx(1 / 804.672, rel=1e-9)
        assert W[1, 0] == W[0, 1]

    def test_beyond_cutoff(self):
        b = destination_point(ORIGIN, 90.0, 2000.0)
        W = build_weights([SpatialUnit("a", ORIGIN, 0), SpatialUnit("b", b, 0)]).toarray()
        assert W[0, 1] == 0.0

    def test_self_weight_floor(self):
        W = build_weights([SpatialUnit("a", ORIGIN, 0)]).toarray()
        assert W[0, 0] == 0.01

    def test_self_weight_override(self):
        W = build_weights([SpatialUnit("a", ORIGIN, 0)], self_weight=0.0).toarray()
        assert W[0, 0] == 0.0

    def test_near_neighbour_capped(self):
        b = destination_point(ORIGIN, 0.0, 20.0)
        W = build_weights([SpatialUnit("a", ORIGIN, 0), SpatialUnit("b", b, 0)]).toarray()
        assert W[0, 1] == 0.01

    def test_random_matches_dense(self, rng):
        n = 300
        lat = ORIGIN.lat_deg + rng.uniform(-0.03, 0.03, n)
        lon = ORIGIN.lon_deg + rng.uniform(-0.03, 0.03, n)
        units = units_from(lat, lon, np.zeros(n))
        W = build_weights(units).toarray()
        for i in range(0, n, 13):
            for j in range(n):
                d = haversine_distance(units[i].representative_point, units[j].representative_point)
                want = 0.01 if i == j else (1 / max(d, 100.0) if d <= MILE_M else 0.0)
                assert W[i, j] == pytest.approx(want, rel=1e-12)


class TestGiStar:
    def test_constant_field(self):
        lat, lon, _ = grid_fixture()
        res = gi_star(units_from(lat, lon, np.full(25, 3.0)), build_weights(units_from(lat, lon, np.zeros(25))))
        assert all(r.gi_star == 0 and r.classification is GiClass.NOT_SIGNIFICANT for r in res)

    def test_grid_matches_frozen_oracle(self):
        lat, lon, x = grid_fixture()
        units = units_from(lat, lon, x)
        z = gi_star_values(x, build_weights(units))
        np.testing.assert_allclose(z.reshape(5, 5), GRID_Z, atol=5e-8)
        np.testing.assert_allclose(z, gi_star_direct(x, lat, lon), rtol=1e-9)

    def test_grid_classes_follow_frozen_z(self):
        # the block center lands at 2.52, inside the 95% band; see notes on the self weight
        lat, lon, x = grid_fixture()
        res = gi_star(units_from(lat, lon, x), build_weights(units_from(lat, lon, x)))
        assert [r.classification for r in res] == [classify(z) for z in GRID_Z.ravel()]
        assert res[6].classification is GiClass.HOT95
        assert res[24].classification is GiClass.NOT_SIGNIFICANT

    def test_two_units(self):
        b = destination_point(ORIGIN, 90.0, 500.0)
        units = [SpatialUnit("a", ORIGIN, 1.0), SpatialUnit("b", b, 3.0)]
        z = gi_star_values(np.array([1.0, 3.0]), build_weights(units))
        assert np.all(np.isfinite(z))
        assert z[0] == pytest.approx(-z[1], rel=1e-12)
        np.testing.assert_allclose(z, gi_star_direct([1.0, 3.0], [ORIGIN.lat_deg, b.lat_deg],
                                                     [ORIGIN.lon_deg, b.lon_deg]), rtol=1e-9)

    def test_as_printed_variant_is_nan(self):
        lat, lon, x = grid_fixture()
        z = gi_star_values(x, build_weights(units_from(lat, lon, x)), variant="as_printed")
        assert np.all(np.isnan(z))
        assert classify(float(z[0])) is GiClass.NOT_SIGNIFICANT

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            gi_star_values(np.array([0.0, 1.0]), np.eye(2), variant="other")

    def test_antisymmetric_values_mean_zero(self):
        lat, lon = grid_units(4, 4, 400.0)
        x = np.array([r - 1.5 for r in range(4) for _ in range(4)]) + 10.0
        z = gi_star_values(x, build_weights(units_from(lat, lon, x)))
        assert abs(z.mean()) < 1e-9

    @given(st.integers(0, 2**32 - 1), st.integers(3, 120), st.floats(-50, 50), st.floats(0.1, 100))
    def test_affine_invariance_and_oracle(self, seed, n, shift, scale):
        r = np.random.default_rng(seed)
        lat = ORIGIN.lat_deg + r.uniform(-0.02, 0.02, n)
        lon = ORIGIN.lon_deg + r.uniform(-0.02, 0.02, n)
        x = r.gamma(2.0, 1.0, n)
        W = build_weights(units_from(lat, lon, np.zeros(n)))
        z = gi_star_values(x, W)
        np.testing.assert_allclose(z, gi_star_direct(x, lat, lon), rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(gi_star_values(x * scale + shift, W), z, rtol=1e-9, atol=1e-12)


class TestClassify:
    @pytest.mark.parametrize("z,cls", [
        (2.6, GiClass.HOT99), (2.575829, GiClass.HOT99), (2.0, GiClass.HOT95), (1.7, GiClass.HOT90),
        (0.0, GiClass.NOT_SIGNIFICANT), (-1.7, GiClass.COLD90), (-1.959964, GiClass.COLD95),
        (-3.0, GiClass.COLD99), (1.6448, GiClass.NOT_SIGNIFICANT), (math.nan, GiClass.NOT_SIGNIFICANT),
    ])
    def test_bins(self, z, cls):
        assert classify(z) is cls

    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_monotone(self, a, b):
        order = [GiClass.COLD99, GiClass.COLD95, GiClass.COLD90, GiClass.NOT_SIGNIFICANT,
                 GiClass.HOT90, GiClass.HOT95, GiClass.HOT99]
        lo, hi = sorted((a, b))
        assert order.index(classify(lo)) <= order.index(classify(hi))


def at(y, m, d, hh, mm=0, tz=timezone.utc):
    return datetime(y, m, d, hh, mm, tzinfo=tz).timestamp()


class TestPartitions:
    cal = HolidayCalendar()

    @pytest.mark.parametrize("ts,day,period", [
        (at(2021, 11, 2, 7, 30), DayClass.WORKDAY, Period.MORNING_PEAK),
        (at(2021, 11, 6, 13), DayClass.HOLIDAY, Period.DAYTIME),
        (at(2021, 11, 25, 21), DayClass.HOLIDAY, Period.NIGHTTIME),
    ])
    def test_examples(self, ts, day, period):
        assert partition_of(ts, self.cal) == PeriodPartition(day, period)

    @pytest.mark.parametrize("hour,period", [(5, Period.NIGHTTIME), (6, Period.MORNING_PEAK),
                                             (9, Period.MORNING_PEAK), (10, Period.DAYTIME),
                                             (15, Period.DAYTIME), (16, Period.EVENING_PEAK),
                                             (19, Period.EVENING_PEAK), (20, Period.NIGHTTIME),
                                             (0, Period.NIGHTTIME)])
    def test_hour_boundaries(self, hour, period):
        assert partition_of(at(2021, 11, 3, hour), self.cal).period is period

    def test_minute_before_boundary(self):
        assert partition_of(at(2021, 11, 3, 9, 59), self.cal).period is Period.MORNING_PEAK

    def test_local_timezone(self):
        tz = resolve_timezone("-06:00")
        # 13:30 UTC Tuesday is 07:30 in UTC-6
        assert partition_of(at(2021, 11, 2, 13, 30), self.cal, tz) == PeriodPartition(DayClass.WORKDAY, Period.MORNING_PEAK)
        # 03:00 UTC Saturday is still Friday evening locally
        assert partition_of(at(2021, 11, 6, 3), self.cal, tz).day_class is DayClass.WORKDAY

    def test_resolve_timezone_forms(self):
        assert resolve_timezone("UTC") == timezone.utc
        assert resolve_timezone("+05:30").utcoffset(None) == timedelta(hours=5, minutes=30)
        assert resolve_timezone(-6).utcoffset(None) == timedelta(hours=-6)
        assert resolve_timezone("America/Chicago").utcoffset(datetime(2021, 11, 2)) == timedelta(hours=-5)

    def test_calendar_file(self, tmp_path):
        p = tmp_path / "h.txt"
        p.write_text("# holidays\n2021-11-03\n\n2021-11-04  # extra\n")
        cal = HolidayCalendar.from_file(p)
        assert cal.is_holiday(date(2021, 11, 3))
        assert cal.is_holiday(date(2021, 11, 4))
        assert not cal.is_holiday(date(2021, 11, 25))

    def test_partition_periods_has_all_eight(self):
        class E:
            def __init__(self, t):
                self.event_time = t
        out = partition_periods([E(at(2021, 11, 2, 7)), E(at(2021, 11, 6, 22))], self.cal)
        assert set(out) == set(ALL_PARTITIONS)
        assert sum(len(v) for v in out.values()) == 2
        assert ALL_PARTITIONS[0].label == "Workday_MorningPeak"


class TestOutput:
    def test_cell_format(self):
        assert format_cell(133, 1153) == "133 (11.54%)"
        assert format_cell(188, 1153) == "188 (16.31%)"
        assert format_cell(0, 1153) == "0 (0%)"
        assert format_cell(0, 0) == "0 (0%)"

    def test_summary_layout(self):
        res = gi_star(units_from(*grid_fixture()), build_weights(units_from(*grid_fixture())))
        text = summarize_partitions({"AllTime": res, "Empty": []})
        lines = text.splitlines()
        assert lines[0].split() == ["Class", "AllTime", "Empty"]
        assert [ln.split()[0] for ln in lines[1:]] == ["Cold99", "Cold95", "Cold90", "NotSignificant",
                                                      "Hot90", "Hot95", "Hot99", "Total"]
        assert lines[-1].split() == ["Total", "25", "0"]
        assert all(ln.split()[-2:] == ["0", "(0%)"] for ln in lines[1:-1])

    def test_csv_round_trip(self):
        res = gi_star(units_from(*grid_fixture()), build_weights(units_from(*grid_fixture())))
        buf = io.StringIO()
        write_gi_csv(res, buf)
        back = read_gi_csv(io.StringIO(buf.getvalue()))
        assert [r.classification for r in back] == [r.classification for r in res]
        assert back[6].gi_star == pytest.approx(res[6].gi_star, abs=1e-6)

    def test_negative_value_rejected(self):
        with pytest.raises(ValueError):
            SpatialUnit("a", ORIGIN, -1.0)


def test_zone_aggregation():
    p = {"a": ORIGIN, "b": destination_point(ORIGIN, 90, 1000), "c": destination_point(ORIGIN, 0, 1000)}
    summaries = [SegmentRiskSummary("a", 2, 100, 0.02, RiskClass.HIGH),
                 SegmentRiskSummary("b", 6, 100, 0.06, RiskClass.HIGH),
                 SegmentRiskSummary("c", 0, 50, 0.0, RiskClass.LOW)]
    zones = {"a": "Z1", "b": "Z1", "c": "Z2"}
    ratio = aggregate_zones(summaries, zones, p)
    assert [(u.unit_id, u.value) for u in ratio] == [("Z1", pytest.approx(0.05)), ("Z2", 0.0)]
    count = aggregate_zones(summaries, zones, p, value="count")
    assert [u.value for u in count] == [8.0, 0.0]
    mid = spherical_mean([p["a"], p["b"]])
    assert haversine_distance(mid, destination_point(ORIGIN, 90, 500)) < 0.01
