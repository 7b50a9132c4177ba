"""Synthetic bike-sharing months with planted, labeled anomalies.

The generator writes every source in the same formats the ingest parsers
read, so a synthetic month goes through the exact pipeline a real one does.
Ground truth lives at station-hour granularity.

Two kinds of anomaly can be planted:

* ``traffic_load`` targets single station-hour cells: extra trips are added
  to the cell until its load rises by ``shift_sigma`` standard deviations of
  the normal cell loads.
* ``avg_temp``, ``avg_precip`` and ``avg_wind`` target hour slots: the weather
  of the chosen hour is shifted by ``shift_sigma`` standard deviations of that
  weather variable, and every cell of the hour is labeled with the cause.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .features import Direction
from .geo_ingest import (
    HolidayCalendar,
    NeighborhoodPolygon,
    TransitStop,
    TripRecord,
    UserType,
    WeatherHour,
    format_timestamp,
    haversine_km,
    parse_holidays,
    parse_neighborhoods,
    parse_stops,
    parse_timestamp,
    parse_trips,
    parse_weather,
    write_holidays,
    write_neighborhoods,
    write_stops,
    write_trips,
    write_weather,
)

CELL_FEATURES = ("traffic_load",)
HOUR_FEATURES = ("avg_temp", "avg_precip", "avg_wind")
PLANTABLE = CELL_FEATURES + HOUR_FEATURES

# commute peaks at 8 a.m. and 5-6 p.m.
DEFAULT_PROFILE = (
    0.08, 0.05, 0.04, 0.04, 0.06, 0.15, 0.40, 0.80, 1.00, 0.70, 0.45, 0.45,
    0.50, 0.50, 0.45, 0.50, 0.70, 0.95, 0.90, 0.60, 0.40, 0.30, 0.20, 0.12,
)

CellKey = tuple[str, datetime, Direction]


class InfeasiblePlanError(ValueError):
    """An anomaly plan would plant less than one anomaly."""


@dataclass
class AnomalyPlan:
    feature: str
    rate: float
    shift_sigma: float = 6.0
    stations: list[str] | None = None
    hours: list[int] | None = None

    def __post_init__(self) -> None:
        if self.feature not in PLANTABLE:
            raise ValueError(f"cannot plant anomalies on {self.feature!r}; choose from {PLANTABLE}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("anomaly rate must lie in [0, 1)")
        if self.shift_sigma <= 0:
            raise ValueError("shift magnitude must be positive")
        if self.stations is not None and self.feature not in CELL_FEATURES:
            raise ValueError("weather anomalies target hours, not stations")


@dataclass
class SynthConfig:
    n_stations: int = 10
    n_days: int = 31
    start_date: str = "2023-01-01"
    seed: int = 0
    base_rate: float = 2.5
    hourly_profile: list[float] = field(default_factory=lambda: list(DEFAULT_PROFILE))
    weekend_factor: float = 0.6
    temp_mean: float = -1.0
    temp_day_sd: float = 3.0
    temp_daily_amplitude: float = 3.0
    precip_prob: float = 0.0
    precip_mean_mm: float = 0.6
    wind_mean: float = 14.0
    wind_sd: float = 4.0
    speed_mean_kmh: float = 12.0
    speed_sd_kmh: float = 2.0
    subscriber_share: float = 0.8
    n_stops: int = 40
    holidays: list[str] = field(default_factory=list)
    anomaly_plan: list[AnomalyPlan] = field(
        default_factory=lambda: [
            AnomalyPlan("traffic_load", 0.025),
            AnomalyPlan("avg_wind", 0.025),
        ]
    )

    def __post_init__(self) -> None:
        if self.n_stations < 2:
            raise ValueError("need at least two stations")
        if self.n_days < 1:
            raise ValueError("need at least one day")
        if len(self.hourly_profile) != 24:
            raise ValueError("hourly profile needs 24 multipliers")
        self.anomaly_plan = [p if isinstance(p, AnomalyPlan) else AnomalyPlan(**p) for p in self.anomaly_plan]

    @classmethod
    def from_dict(cls, doc: dict) -> SynthConfig:
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> SynthConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthDataset:
    config: SynthConfig
    trips: list[TripRecord]
    weather: list[WeatherHour]
    stops: list[TransitStop]
    polygons: list[NeighborhoodPolygon]
    holidays: HolidayCalendar
    # cause feature per cell, None for normal cells; covers every generated cell
    labels: dict[CellKey, str | None]

    @property
    def planted(self) -> dict[CellKey, str]:
        return {k: v for k, v in self.labels.items() if v is not None}

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "trips": out / "trips.csv",
            "weather": out / "weather.csv",
            "stops": out / "stops.txt",
            "neighborhoods": out / "neighborhoods.geojson",
            "holidays": out / "holidays.txt",
            "labels": out / "labels.csv",
            "config": out / "synth_config.json",
        }
        write_trips(self.trips, paths["trips"])
        write_weather(self.weather, paths["weather"])
        write_stops(self.stops, paths["stops"])
        write_neighborhoods(self.polygons, paths["neighborhoods"])
        write_holidays(self.holidays, paths["holidays"], comment="synthetic holiday calendar")
        write_labels(self.labels, paths["labels"])
        paths["config"].write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return paths

    @classmethod
    def read(cls, in_dir: str | Path) -> SynthDataset:
        d = Path(in_dir)
        trips, _ = parse_trips(d / "trips.csv")
        weather, _ = parse_weather(d / "weather.csv")
        stops, _ = parse_stops(d / "stops.txt")
        polygons, _ = parse_neighborhoods(d / "neighborhoods.geojson")
        holidays, _ = parse_holidays(d / "holidays.txt")
        return cls(
            SynthConfig.load(d / "synth_config.json"),
            trips, weather, stops, polygons, holidays,
            read_labels(d / "labels.csv"),
        )


# ---------------------------------------------------------------------------
# generation


def _floor_hour(ts: datetime) -> datetime:
    return ts.replace(minute=0, second=0, microsecond=0)


def cell_keys(trips: list[TripRecord]) -> set[CellKey]:
    keys = set()
    for t in trips:
        keys.add((t.start_station_id, _floor_hour(t.start_time), Direction.OUTGOING))
        keys.add((t.end_station_id, _floor_hour(t.end_time), Direction.INCOMING))
    return keys


class _TripFactory:
    def __init__(self, cfg: SynthConfig, rng: np.random.Generator, stations: list[tuple[str, float, float]],
                 popularity: np.ndarray):
        self.cfg = cfg
        self.rng = rng
        self.stations = stations
        self.popularity = popularity
        self.counter = 0

    def _speed(self) -> float:
        return float(np.clip(self.rng.normal(self.cfg.speed_mean_kmh, self.cfg.speed_sd_kmh), 6.0, 25.0))

    def _duration_s(self, a: int, b: int) -> int:
        _, lat1, lon1 = self.stations[a]
        _, lat2, lon2 = self.stations[b]
        km = haversine_km(lat1, lon1, lat2, lon2)
        overhead = float(self.rng.uniform(60, 180))
        return int(round(km / self._speed() * 3600 + overhead))

    def _other(self, a: int) -> int:
        weights = self.popularity.copy()
        weights[a] = 0
        return int(self.rng.choice(len(weights), p=weights / weights.sum()))

    def _user(self) -> UserType:
        return UserType.SUBSCRIBER if self.rng.random() < self.cfg.subscriber_share else UserType.CASUAL

    def make(self, a: int, b: int, start: datetime, duration_s: int) -> TripRecord:
        self.counter += 1
        sa, lat1, lon1 = self.stations[a]
        sb, lat2, lon2 = self.stations[b]
        return TripRecord(
            trip_id=f"T{self.counter:07d}",
            start_time=start,
            end_time=start + timedelta(seconds=duration_s),
            duration=float(duration_s),
            start_station_id=sa,
            end_station_id=sb,
            start_lat=lat1,
            start_lon=lon1,
            end_lat=lat2,
            end_lon=lon2,
            user_type=self._user(),
        )

    def leaving(self, a: int, hour: datetime) -> TripRecord:
        b = self._other(a)
        start = hour + timedelta(seconds=int(self.rng.integers(3600)))
        return self.make(a, b, start, self._duration_s(a, b))

    def arriving(self, b: int, hour: datetime) -> TripRecord:
        a = self._other(b)
        duration = self._duration_s(a, b)
        end = hour + timedelta(seconds=int(self.rng.integers(3600)))
        return self.make(a, b, end - timedelta(seconds=duration), duration)


def _layout(cfg: SynthConfig, rng: np.random.Generator):
    center_lat, center_lon = 42.355, -71.08
    cols = math.ceil(math.sqrt(cfg.n_stations))
    dlat = 0.006  # ~670 m
    dlon = 0.008  # ~660 m at this latitude
    stations = []
    for i in range(cfg.n_stations):
        r, c = divmod(i, cols)
        lat = center_lat + (r - cols / 2) * dlat + rng.uniform(-0.001, 0.001)
        lon = center_lon + (c - cols / 2) * dlon + rng.uniform(-0.001, 0.001)
        stations.append((f"S{i + 1:03d}", round(lat, 6), round(lon, 6)))
    lats = [s[1] for s in stations]
    lons = [s[2] for s in stations]
    lat0, lat1 = min(lats) - 0.004, max(lats) + 0.004
    lon0, lon1 = min(lons) - 0.005, max(lons) + 0.005
    mid_lat, mid_lon = (lat0 + lat1) / 2, (lon0 + lon1) / 2
    names = ["Harbor Point", "Mill Yard", "Fenway Flats", "Strawberry Hill"]
    boxes = [
        (lat0, mid_lat, lon0, mid_lon),
        (lat0, mid_lat, mid_lon, lon1),
        (mid_lat, lat1, lon0, mid_lon),
        (mid_lat, lat1, mid_lon, lon1),
    ]
    polygons = []
    for nid, (name, (a, b, c, d)) in enumerate(zip(names, boxes), start=1):
        ring = tuple((round(x, 6), round(y, 6)) for x, y in ((c, a), (d, a), (d, b), (c, b), (c, a)))
        polygons.append(NeighborhoodPolygon(nid, name, ((ring,),)))
    stops = [
        TransitStop(
            f"P{j + 1:03d}",
            round(float(rng.uniform(lat0, lat1)), 6),
            round(float(rng.uniform(lon0, lon1)), 6),
        )
        for j in range(cfg.n_stops)
    ]
    return stations, polygons, stops


def _weather(cfg: SynthConfig, rng: np.random.Generator, hours: list[datetime]) -> dict[str, np.ndarray]:
    n = len(hours)
    day_offsets = np.zeros(cfg.n_days)
    for d in range(cfg.n_days):
        prev = day_offsets[d - 1] if d else 0.0
        day_offsets[d] = 0.6 * prev + rng.normal(0, cfg.temp_day_sd * 0.8)
    hod = np.array([h.hour for h in hours])
    day_idx = np.arange(n) // 24
    temp = (
        cfg.temp_mean
        + day_offsets[day_idx]
        + cfg.temp_daily_amplitude * np.sin((hod - 9) / 24 * 2 * np.pi)
        + rng.normal(0, 0.5, n)
    )
    wind = np.empty(n)
    level = cfg.wind_mean
    for i in range(n):
        level = cfg.wind_mean + 0.8 * (level - cfg.wind_mean) + rng.normal(0, cfg.wind_sd * 0.6)
        wind[i] = max(level, 0.0)
    raining = rng.random(n) < cfg.precip_prob
    precip = np.where(raining, rng.exponential(cfg.precip_mean_mm, n), 0.0)
    sky = np.repeat(rng.integers(1, 5, size=math.ceil(n / 6)), 6)[:n]
    return {"avg_temp": temp, "avg_wind": wind, "avg_precip": precip, "sky": sky}


def _coco(precip: float, sky: int) -> int:
    if precip <= 0:
        return int(sky)
    return 7 if precip < 1.0 else 8


def generate(config: SynthConfig | None = None) -> SynthDataset:
    """Generate a labeled synthetic month. Deterministic in ``config.seed``."""
    cfg = config or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    start_day = date.fromisoformat(cfg.start_date)
    holidays = HolidayCalendar(frozenset(date.fromisoformat(d) for d in cfg.holidays))
    hours = [
        datetime.combine(start_day, datetime.min.time()) + timedelta(hours=i) for i in range(cfg.n_days * 24)
    ]

    stations, polygons, stops = _layout(cfg, rng)
    popularity = rng.uniform(0.6, 1.4, cfg.n_stations)
    factory = _TripFactory(cfg, rng, stations, popularity)
    wx = _weather(cfg, rng, hours)

    trips: list[TripRecord] = []
    for hour in hours:
        quiet = hour.weekday() >= 5 or hour.date() in holidays.dates
        mult = cfg.base_rate * cfg.hourly_profile[hour.hour] * (cfg.weekend_factor if quiet else 1.0)
        counts = rng.poisson(mult * popularity)
        for a, k in enumerate(counts):
            for _ in range(int(k)):
                trips.append(factory.leaving(a, hour))

    normal_cells = cell_keys(trips)
    loads: dict[CellKey, int] = defaultdict(int)
    for t in trips:
        loads[(t.start_station_id, _floor_hour(t.start_time), Direction.OUTGOING)] += 1
        loads[(t.end_station_id, _floor_hour(t.end_time), Direction.INCOMING)] += 1
    load_sd = float(np.std(list(loads.values())))

    planted_cells: dict[CellKey, str] = {}
    planted_hours: dict[datetime, str] = {}
    hours_with_cells = sorted({k[1] for k in normal_cells})
    station_index = {s[0]: i for i, s in enumerate(stations)}
    hour_index = {h: i for i, h in enumerate(hours)}

    for plan in cfg.anomaly_plan:
        if plan.rate == 0:
            continue
        if plan.feature in CELL_FEATURES:
            eligible = sorted(
                k for k in normal_cells
                if k not in planted_cells
                and (plan.stations is None or k[0] in plan.stations)
                and (plan.hours is None or k[1].hour in plan.hours)
            )
            chosen = _choose(rng, eligible, plan)
            extra = max(1, math.ceil(plan.shift_sigma * load_sd))
            for key in chosen:
                sid, hour, direction = key
                a = station_index[sid]
                for _ in range(extra):
                    trip = factory.leaving(a, hour) if direction is Direction.OUTGOING else factory.arriving(a, hour)
                    trips.append(trip)
                planted_cells[key] = plan.feature
        else:
            eligible_h = [
                h for h in hours_with_cells
                if h not in planted_hours and (plan.hours is None or h.hour in plan.hours)
            ]
            chosen_h = _choose(rng, eligible_h, plan)
            series = wx[plan.feature]
            sd = float(np.std(series))
            if sd == 0 and plan.feature == "avg_precip":
                # a dry month has no spread; scale by the typical rain amount instead
                sd = cfg.precip_mean_mm
            if sd == 0:
                raise InfeasiblePlanError(f"{plan.feature} is constant; a sigma shift is undefined")
            shift = plan.shift_sigma * sd
            for h in chosen_h:
                series[hour_index[h]] += shift
                planted_hours[h] = plan.feature

    weather = [
        WeatherHour(
            h,
            round(float(wx["avg_temp"][i]), 1),
            round(float(wx["avg_precip"][i]), 1),
            round(float(wx["avg_wind"][i]), 1),
            _coco(round(float(wx["avg_precip"][i]), 1), int(wx["sky"][i])),
        )
        for i, h in enumerate(hours)
    ]

    trips.sort(key=lambda t: (t.start_time, t.trip_id))
    labels: dict[CellKey, str | None] = {}
    for key in sorted(cell_keys(trips)):
        labels[key] = planted_cells.get(key) or planted_hours.get(key[1])
    return SynthDataset(cfg, trips, weather, stops, polygons, holidays, labels)


def _choose(rng: np.random.Generator, eligible: list, plan: AnomalyPlan) -> list:
    expected = plan.rate * len(eligible)
    if expected < 1:
        raise InfeasiblePlanError(
            f"plan on {plan.feature} plants {expected:.2f} anomalies (< 1); raise the rate or widen the target"
        )
    k = int(round(expected))
    picks = rng.choice(len(eligible), size=k, replace=False)
    return [eligible[i] for i in sorted(picks)]


# ---------------------------------------------------------------------------
# labels

LABEL_HEADER = ("station_id", "hour_start", "direction", "label", "cause_feature")


def write_labels(labels: dict[CellKey, str | None], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for (sid, hour, direction), cause in sorted(labels.items()):
            w.writerow([sid, format_timestamp(hour), direction.label, int(cause is not None), cause or ""])


def read_labels(path: str | Path) -> dict[CellKey, str | None]:
    out: dict[CellKey, str | None] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            key = (rec["station_id"], parse_timestamp(rec["hour_start"]), Direction.from_label(rec["direction"]))
            out[key] = rec["cause_feature"] or None
    return out
