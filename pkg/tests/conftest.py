from pathlib import Path

import pytest

from mobility_ad.features import aggregate_station_hours
from mobility_ad.geo_ingest import parse_holidays, parse_neighborhoods, parse_stops, parse_trips, parse_weather

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def fixture_sources():
    trips, _ = parse_trips(FIXTURES / "trips_20.csv")
    weather, _ = parse_weather(FIXTURES / "weather.csv")
    stops, _ = parse_stops(FIXTURES / "stops.txt")
    polygons, _ = parse_neighborhoods(FIXTURES / "neighborhoods.geojson")
    holidays, _ = parse_holidays(FIXTURES / "holidays.txt")
    return trips, weather, stops, polygons, holidays


@pytest.fixture
def fixture_rows(fixture_sources):
    return aggregate_station_hours(*fixture_sources)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
