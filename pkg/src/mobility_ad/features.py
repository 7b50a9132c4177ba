"""Station-hour aggregation and numeric encoding.

A station-hour row summarizes the trips leaving (Outgoing) or arriving at
(Incoming) one station during one clock hour, joined with the weather for that
hour, the calendar, the number of nearby transit stops and the neighborhood
the station sits in.
"""

from __future__ import annotations

import bisect
import csv
import io
import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from datetime import datetime
from enum import IntEnum
from pathlib import Path

import numpy as np

from .geo_ingest import (
    HolidayCalendar,
    NeighborhoodPolygon,
    TransitStop,
    TripRecord,
    UserType,
    WeatherHour,
    format_timestamp,
    haversine_km,
    nearby_stop_count,
    parse_timestamp,
    point_in_neighborhood,
    station_registry,
)

logger = logging.getLogger(__name__)

NO_NEIGHBORHOOD = -1
SPEED_CAP_KMH = 99.0

FEATURE_COLUMNS = (
    "traffic_load",
    "direction",
    "avg_distance_km",
    "avg_duration_min",
    "avg_speed_kmh",
    "subscriber_ratio",
    "hour",
    "day_of_month",
    "weekday",
    "is_holiday",
    "avg_temp",
    "avg_precip",
    "avg_wind",
    "coco",
    "nearby_transit_stops",
    "neighborhood_id",
)
TRIP_COLUMNS = ("duration_min", "distance_km", "speed_kmh")
CATEGORICAL_COLUMNS = ("direction", "coco", "neighborhood_id")


class Direction(IntEnum):
    INCOMING = 0
    OUTGOING = 1

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def from_label(cls, text: str) -> Direction:
        return cls[text.upper()]


@dataclass(frozen=True)
class StationHourRow:
    station_id: str
    hour_start: datetime
    direction: Direction
    traffic_load: int
    avg_distance_km: float
    avg_duration_min: float
    avg_speed_kmh: float
    subscriber_ratio: float
    hour: int
    day_of_month: int
    weekday: int
    is_holiday: int
    avg_temp: float
    avg_precip: float
    avg_wind: float
    coco: int
    nearby_transit_stops: int
    neighborhood_id: int

    @property
    def key(self) -> tuple[str, datetime, Direction]:
        return (self.station_id, self.hour_start, self.direction)

    def feature_values(self) -> list[float]:
        return [float(getattr(self, name)) for name in FEATURE_COLUMNS]


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense numeric view of a list of rows plus the encoding that produced it."""

    values: np.ndarray
    column_names: tuple[str, ...]
    rows: tuple = ()
    code_maps: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[1] != len(self.column_names):
            raise ValueError("matrix shape does not match column names")
        if self.rows and len(self.rows) != self.values.shape[0]:
            raise ValueError("row count does not match matrix")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains NaN or infinite values")
        self.values.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_names.index(name)]

    def decode(self, name: str) -> list:
        """Map an ordinal-encoded categorical column back to its labels."""
        inverse = {code: label for label, code in self.code_maps[name].items()}
        return [inverse[int(v)] for v in self.column(name)]


def trip_distance_km(trip: TripRecord) -> float:
    return haversine_km(trip.start_lat, trip.start_lon, trip.end_lat, trip.end_lon)


def trip_speed_kmh(distance_km: float, duration_s: float) -> float:
    return min(distance_km / (duration_s / 3600.0), SPEED_CAP_KMH)


def _floor_hour(ts: datetime) -> datetime:
    return ts.replace(minute=0, second=0, microsecond=0)


class WeatherLookup:
    """Hourly weather with forward fill, and back fill before the first hour."""

    def __init__(self, hours: Sequence[WeatherHour]):
        self._hours = sorted(hours, key=lambda h: h.hour_start)
        self._by_hour = {h.hour_start: h for h in self._hours}
        self._starts = [h.hour_start for h in self._hours]
        if not self._hours:
            logger.warning("no weather data; weather features are zero-filled")

    def __call__(self, hour_start: datetime) -> tuple[float, float, float, int]:
        hit = self._by_hour.get(hour_start)
        if hit is None:
            if not self._hours:
                return (0.0, 0.0, 0.0, 0)
            i = bisect.bisect_right(self._starts, hour_start) - 1
            hit = self._hours[max(i, 0)]
        return (hit.temp, hit.precip, hit.wind_speed, hit.coco)


def aggregate_station_hours(
    trips: Sequence[TripRecord],
    weather: Sequence[WeatherHour],
    stops: Sequence[TransitStop],
    polygons: Sequence[NeighborhoodPolygon],
    holidays: HolidayCalendar,
    radius_m: float = 300.0,
) -> list[StationHourRow]:
    """Aggregate trips into one row per (station, clock hour, direction).

    Outgoing rows collect trips by start station and start hour, Incoming rows
    by end station and end hour. Rows come back sorted by station id, hour and
    direction.
    """
    coords, _ = station_registry(trips)
    station_ctx: dict[str, tuple[int, int]] = {}
    for sid, (lat, lon) in coords.items():
        nid = point_in_neighborhood(lat, lon, polygons)
        station_ctx[sid] = (
            nearby_stop_count(lat, lon, stops, radius_m),
            NO_NEIGHBORHOOD if nid is None else nid,
        )

    # (station, hour, direction) -> list of (distance, duration_s, speed, is_subscriber)
    cells: dict[tuple[str, datetime, Direction], list[tuple[float, float, float, bool]]] = defaultdict(list)
    for trip in trips:
        dist = trip_distance_km(trip)
        entry = (dist, trip.duration, trip_speed_kmh(dist, trip.duration), trip.user_type is UserType.SUBSCRIBER)
        cells[(trip.start_station_id, _floor_hour(trip.start_time), Direction.OUTGOING)].append(entry)
        cells[(trip.end_station_id, _floor_hour(trip.end_time), Direction.INCOMING)].append(entry)

    lookup = WeatherLookup(weather)
    rows = []
    for key in sorted(cells):
        sid, hour_start, direction = key
        entries = cells[key]
        n = len(entries)
        temp, precip, wind, coco = lookup(hour_start)
        stops_near, nid = station_ctx[sid]
        rows.append(
            StationHourRow(
                station_id=sid,
                hour_start=hour_start,
                direction=direction,
                traffic_load=n,
                avg_distance_km=sum(e[0] for e in entries) / n,
                avg_duration_min=sum(e[1] for e in entries) / n / 60.0,
                avg_speed_kmh=sum(e[2] for e in entries) / n,
                subscriber_ratio=sum(e[3] for e in entries) / n,
                hour=hour_start.hour,
                day_of_month=hour_start.day,
                weekday=hour_start.weekday(),
                is_holiday=int(hour_start.date() in holidays.dates),
                avg_temp=temp,
                avg_precip=precip,
                avg_wind=wind,
                coco=coco,
                nearby_transit_stops=stops_near,
                neighborhood_id=nid,
            )
        )
    return rows


def encode_features(rows: Sequence[StationHourRow]) -> FeatureMatrix:
    """Encode rows into the fixed 16-column numeric layout of ``FEATURE_COLUMNS``."""
    if not rows:
        raise ValueError("cannot encode an empty row list")
    values = np.array([r.feature_values() for r in rows], dtype=np.float64)
    code_maps = {
        "direction": {d.label: int(d) for d in Direction},
        "coco": {c: c for c in sorted({r.coco for r in rows})},
        "neighborhood_id": {
            (None if n == NO_NEIGHBORHOOD else n): n for n in sorted({r.neighborhood_id for r in rows})
        },
    }
    return FeatureMatrix(values, FEATURE_COLUMNS, tuple(rows), code_maps)


def trip_feature_matrix(trips: Sequence[TripRecord]) -> FeatureMatrix:
    """Per-trip ``[duration_min, distance_km, speed_kmh]`` matrix."""
    if not trips:
        raise ValueError("cannot build a trip matrix from zero trips")
    out = np.empty((len(trips), 3), dtype=np.float64)
    for i, trip in enumerate(trips):
        dist = trip_distance_km(trip)
        out[i] = (trip.duration / 60.0, dist, trip_speed_kmh(dist, trip.duration))
    return FeatureMatrix(out, TRIP_COLUMNS)


# ---------------------------------------------------------------------------
# text serialization

ROW_HEADER = ("station_id", "hour_start") + FEATURE_COLUMNS
_INT_COLUMNS = {"traffic_load", "direction", "hour", "day_of_month", "weekday", "is_holiday",
                "coco", "nearby_transit_stops", "neighborhood_id"}


def _fmt(value: float) -> str:
    return repr(float(value))


def write_rows_csv(rows: Iterable[StationHourRow], path: str | Path) -> None:
    """Lossless row table (floats written with shortest round-trip repr)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROW_HEADER)
        for r in rows:
            out = [r.station_id, format_timestamp(r.hour_start)]
            for name in FEATURE_COLUMNS:
                v = getattr(r, name)
                out.append(str(int(v)) if name in _INT_COLUMNS else _fmt(v))
            writer.writerow(out)


def read_rows_csv(path: str | Path) -> list[StationHourRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ROW_HEADER:
            raise ValueError(f"{path}: unexpected station-hour table header")
        rows = []
        for rec in reader:
            kwargs: dict = {}
            for name in FEATURE_COLUMNS:
                kwargs[name] = int(rec[name]) if name in _INT_COLUMNS else float(rec[name])
            kwargs["direction"] = Direction(kwargs["direction"])
            rows.append(
                StationHourRow(station_id=rec["station_id"], hour_start=parse_timestamp(rec["hour_start"]), **kwargs)
            )
    return rows


def matrix_to_csv(matrix: FeatureMatrix, precision: int = 6) -> str:
    """Fixed-precision delimited text of the numeric view (golden-file format)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(matrix.column_names)
    for row in matrix.values:
        writer.writerow([f"{v:.{precision}f}" for v in row])
    return buf.getvalue()

