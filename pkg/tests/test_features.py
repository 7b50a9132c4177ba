import csv
import importlib.util
import logging
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobility_ad.features import (
    FEATURE_COLUMNS,
    NO_NEIGHBORHOOD,
    Direction,
    FeatureMatrix,
    aggregate_station_hours,
    encode_features,
    matrix_to_csv,
    read_rows_csv,
    trip_feature_matrix,
    write_rows_csv,
)
from mobility_ad.geo_ingest import HolidayCalendar, TripRecord, UserType, WeatherHour, haversine_km

from .conftest import FIXTURES

NO_HOLIDAYS = HolidayCalendar(frozenset())


def _oracle():
    spec = importlib.util.spec_from_file_location("fixture_oracle", FIXTURES / "make_fixtures.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def trip(tid, start, minutes, a, b, lat_a=42.0, lon_a=-71.0, lat_b=None, lon_b=None, user=UserType.SUBSCRIBER):
    lat_b = lat_a if lat_b is None else lat_b
    lon_b = lon_a if lon_b is None else lon_b
    return TripRecord(tid, start, start + timedelta(minutes=minutes), minutes * 60.0, a, b,
                      lat_a, lon_a, lat_b, lon_b, user)


def test_two_outgoing_trips_arithmetic_means():
    h = datetime(2023, 1, 5, 8, 0)
    # 2 km and 4 km due north of the start station
    km = 1 / 111.19508023353292
    trips = [
        trip("a", h + timedelta(minutes=1), 10, "A", "B", lat_b=42.0 + 2 * km),
        trip("b", h + timedelta(minutes=5), 20, "A", "C", lat_b=42.0 + 4 * km),
    ]
    rows = aggregate_station_hours(trips, [], [], [], NO_HOLIDAYS)
    out = [r for r in rows if r.station_id == "A" and r.direction is Direction.OUTGOING]
    assert len(out) == 1
    r = out[0]
    assert r.traffic_load == 2
    assert r.avg_duration_min == pytest.approx(15)
    assert r.avg_distance_km == pytest.approx(3)
    assert r.subscriber_ratio == 1.0
    assert r.avg_speed_kmh == pytest.approx((12 + 12) / 2)


def test_round_trip_has_zero_distance_and_speed():
    h = datetime(2023, 1, 5, 8, 10)
    rows = aggregate_station_hours([trip("r", h, 15, "A", "A")], [], [], [], NO_HOLIDAYS)
    assert len(rows) == 2
    assert all(r.avg_distance_km == 0 and r.avg_speed_kmh == 0 for r in rows)


def test_speed_is_capped():
    h = datetime(2023, 1, 5, 8, 10)
    fast = TripRecord("f", h, h + timedelta(seconds=1), 1.0, "A", "B", 42.0, -71.0, 42.1, -71.0, UserType.CASUAL)
    rows = aggregate_station_hours([fast], [], [], [], NO_HOLIDAYS)
    assert {r.avg_speed_kmh for r in rows} == {99.0}
    assert {r.subscriber_ratio for r in rows} == {0.0}


def read_golden(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_fixture_aggregates_to_golden_table(fixture_rows):
    golden = read_golden(FIXTURES / "golden_station_rows.csv")
    assert len(fixture_rows) == len(golden) == 8
    for row, want in zip(fixture_rows, golden):
        assert row.station_id == want["station_id"]
        assert row.hour_start == datetime.fromisoformat(want["hour_start"])
        for name in FEATURE_COLUMNS:
            assert float(getattr(row, name)) == pytest.approx(float(want[name]), abs=5e-7), name


def test_encode_single_row_layout(fixture_rows):
    m = encode_features(fixture_rows[:1])
    assert m.shape == (1, 16)
    assert m.column_names == FEATURE_COLUMNS
    assert list(m.values[0]) == fixture_rows[0].feature_values()


def test_direction_encoding(fixture_rows):
    m = encode_features(fixture_rows)
    for r, v in zip(fixture_rows, m.column("direction")):
        assert v == (0 if r.direction is Direction.INCOMING else 1)
    assert m.code_maps["direction"] == {"Incoming": 0, "Outgoing": 1}
    assert m.decode("neighborhood_id").count(None) == 3  # S002 sits in a hole


def test_golden_matrix_bytes(fixture_rows):
    text = matrix_to_csv(encode_features(fixture_rows))
    assert text == (FIXTURES / "golden_matrix.csv").read_text()


def test_neighborhood_none_is_minus_one(fixture_rows):
    s002 = {r.neighborhood_id for r in fixture_rows if r.station_id == "S002"}
    assert s002 == {NO_NEIGHBORHOOD} == {-1}


def test_trip_matrix_examples():
    h = datetime(2023, 1, 5, 8, 0)
    km = 1 / 111.19508023353292
    m = trip_feature_matrix([trip("a", h, 30, "A", "B", lat_b=42.0 + 5 * km), trip("r", h, 12, "A", "A")])
    assert m.column_names == ("duration_min", "distance_km", "speed_kmh")
    np.testing.assert_allclose(m.values, [[30, 5, 10], [12, 0, 0]], atol=1e-9)


def test_trip_matrix_matches_hand_computation(fixture_sources):
    oracle = _oracle()
    trips = fixture_sources[0][:10]
    expected = []
    for tid, start, end, a, b, _ in oracle.TRIPS[:10]:
        secs = (oracle.ts(end) - oracle.ts(start)).total_seconds()
        dist = oracle.great_circle_km(oracle.STATIONS[a], oracle.STATIONS[b])
        expected.append([secs / 60, dist, dist / (secs / 3600)])
    np.testing.assert_allclose(trip_feature_matrix(trips).values, expected, rtol=1e-12)


def test_empty_inputs_are_errors():
    with pytest.raises(ValueError):
        encode_features([])
    with pytest.raises(ValueError):
        trip_feature_matrix([])


def test_feature_matrix_rejects_nan_and_is_read_only():
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([[np.nan]]), ("x",))
    m = FeatureMatrix(np.zeros((2, 1)), ("x",))
    with pytest.raises(ValueError):
        m.values[0, 0] = 1


def test_weather_forward_fill_back_fill_and_absence(caplog):
    h = datetime(2023, 1, 5, 6, 0)
    trips = [trip(str(i), h + timedelta(hours=i, minutes=5), 10, "A", "B") for i in range(4)]
    weather = [WeatherHour(h + timedelta(hours=1), 1.0, 0.0, 5.0, 2), WeatherHour(h + timedelta(hours=2), 2.0, 0.5, 6.0, 7)]
    rows = [r for r in aggregate_station_hours(trips, weather, [], [], NO_HOLIDAYS) if r.direction is Direction.OUTGOING]
    assert [r.avg_temp for r in rows] == [1.0, 1.0, 2.0, 2.0]
    with caplog.at_level(logging.WARNING):
        dry = aggregate_station_hours(trips, [], [], [], NO_HOLIDAYS)
    assert all((r.avg_temp, r.avg_precip, r.avg_wind, r.coco) == (0, 0, 0, 0) for r in dry)
    assert "weather" in caplog.text


def test_rows_csv_round_trip(tmp_path, fixture_rows):
    write_rows_csv(fixture_rows, tmp_path / "rows.csv")
    assert read_rows_csv(tmp_path / "rows.csv") == fixture_rows


stations = st.sampled_from(["A", "B", "C"])


@st.composite
def random_trips(draw):
    base = datetime(2023, 1, 2)
    n = draw(st.integers(1, 25))
    out = []
    for i in range(n):
        start = base + timedelta(minutes=draw(st.integers(0, 3 * 24 * 60)))
        minutes = draw(st.integers(1, 120))
        a, b = draw(stations), draw(stations)
        user = draw(st.sampled_from([UserType.SUBSCRIBER, UserType.CASUAL]))
        lat = {"A": 42.35, "B": 42.36, "C": 42.37}
        out.append(TripRecord(str(i), start, start + timedelta(minutes=minutes), minutes * 60.0, a, b,
                              lat[a], -71.0, lat[b], -71.01, user))
    return out


@settings(max_examples=60, deadline=None)
@given(random_trips())
def test_aggregation_invariants(trips):
    rows = aggregate_station_hours(trips, [], [], [], NO_HOLIDAYS)
    keys = [r.key for r in rows]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)
    for direction in Direction:
        assert sum(r.traffic_load for r in rows if r.direction is direction) == len(trips)
    for r in rows:
        assert r.traffic_load >= 1
        assert 0 <= r.subscriber_ratio <= 1
        assert r.hour == r.hour_start.hour and r.weekday == r.hour_start.weekday()
        assert r.day_of_month == r.hour_start.day
        assert np.isfinite(r.avg_speed_kmh)
    m = encode_features(rows)
    assert np.all(np.isfinite(m.values)) and m.shape == (len(rows), 16)


def test_distance_uses_haversine(fixture_sources, fixture_rows):
    trips = fixture_sources[0]
    t = trips[0]
    d = haversine_km(t.start_lat, t.start_lon, t.end_lat, t.end_lon)
    assert trip_feature_matrix([t]).values[0, 1] == d
