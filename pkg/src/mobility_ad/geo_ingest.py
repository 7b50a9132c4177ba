"""Parsers for the external data sources and the spatial primitives built on them.

Every parser takes a path or an open stream (text or bytes) and returns a
``(records, rejected)`` pair. Rows that fail validation are never dropped
silently: they come back as :class:`RejectedRow` with a machine-readable
reason. Structural problems (missing columns, empty input, duplicate weather
hours) raise :class:`IngestError` subclasses instead.

Coordinates are WGS84 degrees. Polygon rings keep the geographic-JSON
``(lon, lat)`` vertex order; every public function that takes a point uses
``(lat, lon)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from collections.abc import Iterable, Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import date, datetime
from enum import Enum
from pathlib import Path
from typing import IO, Any, Union

EARTH_RADIUS_KM = 6371.0088
# slack for the inclusive radius test, in metres
RADIUS_SLACK_M = 1e-6
STATION_CONFLICT_M = 50.0

Source = Union[str, Path, IO[str], IO[bytes], bytes]


class IngestError(ValueError):
    """Fatal problem with an input source."""


class SchemaError(IngestError):
    """A mandatory column or field is absent."""


class EmptyInputError(IngestError):
    """The source contains no data rows."""


class DuplicateHourError(IngestError):
    """Two weather rows share the same hour."""


class UserType(str, Enum):
    SUBSCRIBER = "Subscriber"
    CASUAL = "Casual"


_USER_TYPES = {
    "subscriber": UserType.SUBSCRIBER,
    "member": UserType.SUBSCRIBER,
    "casual": UserType.CASUAL,
    "customer": UserType.CASUAL,
}


@dataclass(frozen=True)
class RejectedRow:
    line: int
    reason: str
    raw: dict[str, str] = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class TripRecord:
    trip_id: str
    start_time: datetime
    end_time: datetime
    duration: float  # seconds
    start_station_id: str
    end_station_id: str
    start_lat: float
    start_lon: float
    end_lat: float
    end_lon: float
    user_type: UserType


@dataclass(frozen=True)
class WeatherHour:
    hour_start: datetime
    temp: float
    precip: float
    wind_speed: float
    coco: int


@dataclass(frozen=True)
class TransitStop:
    stop_id: str
    lat: float
    lon: float


Ring = tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class NeighborhoodPolygon:
    """A neighborhood made of one or more polygon parts.

    Each part is a tuple of rings; the first ring of a part is its outer
    boundary and the rest are holes. Vertices are ``(lon, lat)``.
    """

    neighborhood_id: int
    name: str
    parts: tuple[tuple[Ring, ...], ...]

    @property
    def rings(self) -> list[Ring]:
        return [ring for part in self.parts for ring in part]


@dataclass(frozen=True)
class HolidayCalendar:
    dates: frozenset[date] = frozenset()

    def __contains__(self, day: object) -> bool:
        if isinstance(day, datetime):
            day = day.date()
        return day in self.dates


@dataclass(frozen=True)
class TripSchema:
    """Maps logical trip fields to column names in the source file.

    ``trip_id`` and ``duration`` are optional; leave them ``None`` (or point
    them at a column the file does not have) and they are derived.
    """

    start_time: str = "starttime"
    end_time: str = "stoptime"
    start_station_id: str = "start station id"
    start_lat: str = "start station latitude"
    start_lon: str = "start station longitude"
    end_station_id: str = "end station id"
    end_lat: str = "end station latitude"
    end_lon: str = "end station longitude"
    user_type: str = "usertype"
    trip_id: str | None = "trip_id"
    duration: str | None = "tripduration"

    MANDATORY = (
        "start_time",
        "end_time",
        "start_station_id",
        "start_lat",
        "start_lon",
        "end_station_id",
        "end_lat",
        "end_lon",
        "user_type",
    )

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str | None]) -> TripSchema:
        unknown = set(mapping) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown trip schema keys: {sorted(unknown)}")
        return cls(**mapping)


# Column layout of the 2023+ Bluebikes exports.
BLUEBIKES_2023_SCHEMA = TripSchema(
    start_time="started_at",
    end_time="ended_at",
    start_station_id="start_station_id",
    start_lat="start_lat",
    start_lon="start_lng",
    end_station_id="end_station_id",
    end_lat="end_lat",
    end_lon="end_lng",
    user_type="member_casual",
    trip_id="ride_id",
    duration=None,
)


# ---------------------------------------------------------------------------
# stream helpers


@contextmanager
def _open_text(source: Source) -> Iterator[IO[str]]:
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8-sig") as fh:
            yield fh
    elif isinstance(source, bytes):
        yield io.StringIO(source.decode("utf-8-sig"), newline="")
    elif isinstance(source, io.TextIOBase):
        yield source
    else:
        # binary stream; detach so the caller's stream stays open
        wrapper = io.TextIOWrapper(source, encoding="utf-8-sig", newline="")  # type: ignore[arg-type]
        try:
            yield wrapper
        finally:
            wrapper.detach()


def _csv_rows(source: Source, required: Iterable[str]) -> Iterator[tuple[int, dict[str, str]]]:
    with _open_text(source) as stream:
        yield from _csv_records(stream, required)


def _csv_records(stream: IO[str], required: Iterable[str]) -> Iterator[tuple[int, dict[str, str]]]:
    reader = csv.DictReader(stream)
    if reader.fieldnames is None:
        raise EmptyInputError("input has no header row")
    header = [name.strip() for name in reader.fieldnames]
    reader.fieldnames = header
    missing = [col for col in required if col not in header]
    if missing:
        raise SchemaError(f"missing mandatory column(s): {missing}")
    for row in reader:
        # DictReader stores overflow values under None
        row.pop(None, None)  # type: ignore[call-overload]
        clean = {k: (v or "").strip() for k, v in row.items()}
        if not any(clean.values()):
            continue
        yield reader.line_num, clean


_TIMESTAMP = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})[T ](\d{1,2}):(\d{2})(?::(\d{2})(?:\.(\d+))?)?$"
)


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO-like local timestamp, tolerating any fractional precision."""
    m = _TIMESTAMP.match(text.strip())
    if not m:
        raise ValueError(f"bad timestamp {text!r}")
    year, month, day, hour, minute = (int(g) for g in m.group(1, 2, 3, 4, 5))
    second = int(m.group(6) or 0)
    frac = m.group(7) or "0"
    micro = int(round(float("0." + frac) * 1_000_000))
    if micro == 1_000_000:
        micro = 999_999
    return datetime(year, month, day, hour, minute, second, micro)


def format_timestamp(ts: datetime) -> str:
    text = ts.strftime("%Y-%m-%d %H:%M:%S")
    if ts.microsecond:
        text += f".{ts.microsecond:06d}"
    return text


def _valid_lat_lon(lat: float, lon: float) -> bool:
    return (
        math.isfinite(lat) and math.isfinite(lon) and -90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0
    )


# ---------------------------------------------------------------------------
# parsers


def parse_trips(
    source: Source, schema: TripSchema | None = None
) -> tuple[list[TripRecord], list[RejectedRow]]:
    """Parse a delimited trip file into :class:`TripRecord` objects.

    Reject reasons: ``bad_timestamp``, ``missing_station``, ``bad_coordinate``,
    ``bad_user_type``, ``bad_duration``, ``negative_duration``, ``zero_duration``.
    """
    schema = schema or TripSchema()
    required = [getattr(schema, name) for name in TripSchema.MANDATORY]
    trips: list[TripRecord] = []
    rejected: list[RejectedRow] = []
    n_rows = 0
    for line, row in _csv_rows(source, required):
        n_rows += 1
        try:
            trips.append(_trip_from_row(row, schema, line))
        except _Reject as exc:
            rejected.append(RejectedRow(line, exc.reason, row))
    if n_rows == 0:
        raise EmptyInputError("trip file has no data rows")
    return trips, rejected


class _Reject(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def _trip_from_row(row: dict[str, str], schema: TripSchema, line: int) -> TripRecord:
    try:
        start = parse_timestamp(row[schema.start_time])
        end = parse_timestamp(row[schema.end_time])
    except ValueError:
        raise _Reject("bad_timestamp") from None

    start_id = row[schema.start_station_id]
    end_id = row[schema.end_station_id]
    if not start_id or not end_id:
        raise _Reject("missing_station")

    try:
        coords = [
            float(row[schema.start_lat]),
            float(row[schema.start_lon]),
            float(row[schema.end_lat]),
            float(row[schema.end_lon]),
        ]
    except ValueError:
        raise _Reject("bad_coordinate") from None
    if not (_valid_lat_lon(coords[0], coords[1]) and _valid_lat_lon(coords[2], coords[3])):
        raise _Reject("bad_coordinate")

    user = _USER_TYPES.get(row[schema.user_type].lower())
    if user is None:
        raise _Reject("bad_user_type")

    if end < start:
        raise _Reject("negative_duration")
    given = row.get(schema.duration) if schema.duration else None
    if given:
        try:
            duration = float(given)
        except ValueError:
            raise _Reject("bad_duration") from None
        if not math.isfinite(duration):
            raise _Reject("bad_duration")
    else:
        duration = (end - start).total_seconds()
    if duration < 0:
        raise _Reject("negative_duration")
    if duration == 0:
        raise _Reject("zero_duration")

    trip_id = row.get(schema.trip_id) if schema.trip_id else None
    return TripRecord(
        trip_id=trip_id or f"L{line}",
        start_time=start,
        end_time=end,
        duration=duration,
        start_station_id=start_id,
        end_station_id=end_id,
        start_lat=coords[0],
        start_lon=coords[1],
        end_lat=coords[2],
        end_lon=coords[3],
        user_type=user,
    )


WEATHER_COLUMNS = ("time", "temp", "prcp", "wspd", "coco")


def parse_weather(source: Source) -> tuple[list[WeatherHour], list[RejectedRow]]:
    """Parse an hourly weather export (time, temp, prcp, wspd, coco).

    Output is sorted by hour. A repeated hour is fatal.
    """
    hours: list[WeatherHour] = []
    rejected: list[RejectedRow] = []
    seen: dict[datetime, int] = {}
    for line, row in _csv_rows(source, WEATHER_COLUMNS):
        try:
            hour = _weather_from_row(row)
        except _Reject as exc:
            rejected.append(RejectedRow(line, exc.reason, row))
            continue
        if hour.hour_start in seen:
            raise DuplicateHourError(
                f"duplicate weather hour {hour.hour_start} on lines {seen[hour.hour_start]} and {line}"
            )
        seen[hour.hour_start] = line
        hours.append(hour)
    hours.sort(key=lambda h: h.hour_start)
    return hours, rejected


def _weather_from_row(row: dict[str, str]) -> WeatherHour:
    try:
        ts = parse_timestamp(row["time"])
    except ValueError:
        raise _Reject("bad_timestamp") from None
    if ts.minute or ts.second or ts.microsecond:
        raise _Reject("unaligned_hour")
    values = {}
    for col in ("temp", "prcp", "wspd", "coco"):
        text = row[col]
        if not text:
            raise _Reject(f"missing_value:{col}")
        try:
            values[col] = float(text)
        except ValueError:
            raise _Reject(f"bad_number:{col}") from None
        if not math.isfinite(values[col]):
            raise _Reject(f"bad_number:{col}")
    if values["prcp"] < 0:
        raise _Reject("negative_precip")
    if values["wspd"] < 0:
        raise _Reject("negative_wind")
    coco = values["coco"]
    if coco < 0 or coco != int(coco):
        raise _Reject("bad_coco")
    return WeatherHour(ts, values["temp"], values["prcp"], values["wspd"], int(coco))


def parse_stops(source: Source) -> tuple[list[TransitStop], list[RejectedRow]]:
    """Parse a GTFS ``stops.txt``; only id and coordinates are kept."""
    stops: list[TransitStop] = []
    rejected: list[RejectedRow] = []
    for line, row in _csv_rows(source, ("stop_id", "stop_lat", "stop_lon")):
        if not row["stop_id"]:
            rejected.append(RejectedRow(line, "missing_stop_id", row))
            continue
        try:
            lat, lon = float(row["stop_lat"]), float(row["stop_lon"])
        except ValueError:
            rejected.append(RejectedRow(line, "bad_coordinate", row))
            continue
        if not _valid_lat_lon(lat, lon):
            rejected.append(RejectedRow(line, "bad_coordinate", row))
            continue
        stops.append(TransitStop(row["stop_id"], lat, lon))
    return stops, rejected


_NAME_KEYS = ("name", "Name", "NAME", "neighborhood", "Neighborhood", "blockgr2020_ctr_neighb_name")
_ID_KEYS = ("neighborhood_id", "id", "OBJECTID", "objectid")


def parse_neighborhoods(source: Source) -> tuple[list[NeighborhoodPolygon], list[RejectedRow]]:
    """Parse a FeatureCollection of Polygon / MultiPolygon neighborhoods.

    The id comes from a ``neighborhood_id`` (or ``id``) property, then the
    feature id, then the 1-based feature position. ``line`` in a rejected row
    is the 1-based feature index.
    """
    with _open_text(source) as stream:
        text = stream.read()
    if not text.strip():
        raise EmptyInputError("neighborhood file is empty")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"neighborhood file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise SchemaError("neighborhood file must be a FeatureCollection")
    features = doc.get("features")
    if not isinstance(features, list):
        raise SchemaError("FeatureCollection has no 'features' list")

    polygons: list[NeighborhoodPolygon] = []
    rejected: list[RejectedRow] = []
    used_ids: set[int] = set()
    for index, feature in enumerate(features, start=1):
        props = (feature or {}).get("properties") or {}
        raw = {"properties": json.dumps(props, sort_keys=True)}
        try:
            polygon = _neighborhood_from_feature(feature, props, index)
        except _Reject as exc:
            rejected.append(RejectedRow(index, exc.reason, raw))
            continue
        if polygon.neighborhood_id in used_ids:
            rejected.append(RejectedRow(index, "duplicate_id", raw))
            continue
        used_ids.add(polygon.neighborhood_id)
        polygons.append(polygon)
    return polygons, rejected


def _neighborhood_from_feature(feature: Any, props: dict, index: int) -> NeighborhoodPolygon:
    geometry = (feature or {}).get("geometry") or {}
    kind = geometry.get("type")
    coords = geometry.get("coordinates")
    if kind == "Polygon":
        raw_parts = [coords]
    elif kind == "MultiPolygon":
        raw_parts = coords
    else:
        raise _Reject("unsupported_geometry")
    if not isinstance(raw_parts, list) or not raw_parts:
        raise _Reject("bad_geometry")

    parts = []
    for raw_part in raw_parts:
        if not isinstance(raw_part, list) or not raw_part:
            raise _Reject("bad_geometry")
        parts.append(tuple(_ring(raw_ring) for raw_ring in raw_part))

    nid: Any = None
    for key in _ID_KEYS:
        if props.get(key) is not None:
            nid = props[key]
            break
    if nid is None:
        nid = feature.get("id", index)
    try:
        nid = int(nid)
    except (TypeError, ValueError):
        raise _Reject("bad_id") from None
    if nid < 0:
        raise _Reject("bad_id")

    name = next((str(props[k]) for k in _NAME_KEYS if props.get(k) is not None), f"neighborhood {nid}")
    return NeighborhoodPolygon(nid, name, tuple(parts))


def _ring(raw_ring: Any) -> Ring:
    try:
        ring = tuple((float(pt[0]), float(pt[1])) for pt in raw_ring)
    except (TypeError, ValueError, IndexError):
        raise _Reject("bad_coordinate") from None
    if len(ring) < 4:
        raise _Reject("short_ring")
    if ring[0] != ring[-1]:
        raise _Reject("open_ring")
    if not all(_valid_lat_lon(lat, lon) for lon, lat in ring):
        raise _Reject("bad_coordinate")
    return ring


def parse_holidays(source: Source) -> tuple[HolidayCalendar, list[RejectedRow]]:
    """One ISO date per line; ``#`` starts a comment."""
    with _open_text(source) as stream:
        lines = stream.read().splitlines()
    dates: set[date] = set()
    rejected: list[RejectedRow] = []
    for line_no, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            day = date.fromisoformat(text)
        except ValueError:
            rejected.append(RejectedRow(line_no, "bad_date", {"line": line}))
            continue
        dates.add(day)
    return HolidayCalendar(frozenset(dates)), rejected


# ---------------------------------------------------------------------------
# spatial primitives


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in km on a sphere of mean Earth radius."""
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlam = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def _on_segment(x: float, y: float, x1: float, y1: float, x2: float, y2: float) -> bool:
    cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
    scale = max(abs(x2 - x1), abs(y2 - y1), 1.0)
    if abs(cross) > 1e-12 * scale:
        return False
    return min(x1, x2) <= x <= max(x1, x2) and min(y1, y2) <= y <= max(y1, y2)


def _in_part(x: float, y: float, part: Sequence[Ring]) -> bool:
    inside = False
    for ring in part:
        for (x1, y1), (x2, y2) in zip(ring, ring[1:]):
            if _on_segment(x, y, x1, y1, x2, y2):
                return True
            if (y1 > y) != (y2 > y):
                x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
                if x < x_cross:
                    inside = not inside
    return inside


def point_in_neighborhood(
    lat: float, lon: float, polygons: Sequence[NeighborhoodPolygon]
) -> int | None:
    """Return the id of the first polygon containing the point, else ``None``.

    Even-odd ray casting over all rings of a part, so holes fall out
    naturally. A point lying on any ring edge counts as inside.
    """
    for polygon in polygons:
        for part in polygon.parts:
            if _in_part(lon, lat, part):
                return polygon.neighborhood_id
    return None


def nearby_stop_count(
    station_lat: float,
    station_lon: float,
    stops: Sequence[TransitStop],
    radius_m: float = 300.0,
) -> int:
    """Count stops within ``radius_m`` metres (inclusive)."""
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    limit = radius_m + RADIUS_SLACK_M
    return sum(
        1 for s in stops if haversine_km(station_lat, station_lon, s.lat, s.lon) * 1000.0 <= limit
    )


@dataclass(frozen=True)
class StationConflict:
    station_id: str
    trip_id: str
    lat: float
    lon: float
    conflict_lat: float
    conflict_lon: float
    distance_m: float


def station_registry(
    trips: Iterable[TripRecord],
) -> tuple[dict[str, tuple[float, float]], list[StationConflict]]:
    """Station coordinates taken from the first trip that mentions each station.

    Later sightings more than 50 m away are reported as conflicts; the first
    coordinates are kept regardless.
    """
    coords: dict[str, tuple[float, float]] = {}
    conflicts: list[StationConflict] = []
    for trip in trips:
        for sid, lat, lon in (
            (trip.start_station_id, trip.start_lat, trip.start_lon),
            (trip.end_station_id, trip.end_lat, trip.end_lon),
        ):
            known = coords.get(sid)
            if known is None:
                coords[sid] = (lat, lon)
                continue
            dist_m = haversine_km(known[0], known[1], lat, lon) * 1000.0
            if dist_m > STATION_CONFLICT_M:
                conflicts.append(
                    StationConflict(sid, trip.trip_id, known[0], known[1], lat, lon, dist_m)
                )
    return coords, conflicts


# ---------------------------------------------------------------------------
# writers (normalized forms that the parsers above read back losslessly)

TRIP_HEADER = (
    "trip_id",
    "tripduration",
    "starttime",
    "stoptime",
    "start station id",
    "start station latitude",
    "start station longitude",
    "end station id",
    "end station latitude",
    "end station longitude",
    "usertype",
)


def _duration_text(seconds: float) -> str:
    return str(int(seconds)) if float(seconds).is_integer() else repr(float(seconds))


def write_trips(trips: Iterable[TripRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIP_HEADER)
        for t in trips:
            w.writerow([
                t.trip_id, _duration_text(t.duration), format_timestamp(t.start_time), format_timestamp(t.end_time),
                t.start_station_id, t.start_lat, t.start_lon, t.end_station_id, t.end_lat, t.end_lon,
                t.user_type.value,
            ])


def write_weather(weather: Iterable[WeatherHour], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WEATHER_COLUMNS)
        for h in weather:
            w.writerow([format_timestamp(h.hour_start), h.temp, h.precip, h.wind_speed, h.coco])


def write_stops(stops: Iterable[TransitStop], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("stop_id", "stop_name", "stop_lat", "stop_lon"))
        for s in stops:
            w.writerow([s.stop_id, f"Stop {s.stop_id}", s.lat, s.lon])


def write_neighborhoods(polygons: Iterable[NeighborhoodPolygon], path: str | Path) -> None:
    features = []
    for p in polygons:
        parts = [[[list(v) for v in ring] for ring in part] for part in p.parts]
        geometry = (
            {"type": "Polygon", "coordinates": parts[0]}
            if len(parts) == 1
            else {"type": "MultiPolygon", "coordinates": parts}
        )
        features.append(
            {
                "type": "Feature",
                "properties": {"neighborhood_id": p.neighborhood_id, "name": p.name},
                "geometry": geometry,
            }
        )
    doc = {"type": "FeatureCollection", "features": features}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def write_holidays(calendar: HolidayCalendar, path: str | Path, comment: str = "") -> None:
    lines = [f"# {comment}"] if comment else []
    lines += [d.isoformat() for d in sorted(calendar.dates)]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def write_rejects(rejects: Iterable[RejectedRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("line", "reason", "raw"))
        for r in rejects:
            w.writerow([r.line, r.reason, json.dumps(r.raw, sort_keys=True, default=str)])


def write_station_conflicts(conflicts: Iterable[StationConflict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("station_id", "trip_id", "lat", "lon", "conflict_lat", "conflict_lon", "distance_m"))
        for c in conflicts:
            w.writerow([c.station_id, c.trip_id, c.lat, c.lon, c.conflict_lat, c.conflict_lon, f"{c.distance_m:.3f}"])
