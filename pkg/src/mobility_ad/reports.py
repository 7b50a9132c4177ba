"""Spatial and temporal summaries of detected anomalies.

Every report is a pure function of the station-hour rows and the anomaly
records, so regenerating a report from the same inputs gives the same bytes.
A station counts as anomalous on a day when at least one of its rows (either
direction) was flagged that day.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter, defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

from .analysis import AnomalyRecord
from .diffi import ImportanceVector
from .features import Direction, StationHourRow

logger = logging.getLogger(__name__)

Z_95 = 1.96
WEEKDAY_NAMES = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")


@dataclass(frozen=True)
class Table:
    columns: tuple[str, ...]
    rows: tuple[tuple, ...] = ()

    def __post_init__(self) -> None:
        for r in self.rows:
            if len(r) != len(self.columns):
                raise ValueError("row width does not match the header")

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def records(self) -> list[dict]:
        return [dict(zip(self.columns, r)) for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for r in self.rows:
            writer.writerow([_cell(v) for v in r])
        return buf.getvalue()


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    if isinstance(value, date):
        return value.isoformat()
    return str(value)


# ---------------------------------------------------------------------------
# spatial


def _anomalous_station_days(anomalies: Sequence[AnomalyRecord]) -> set[tuple[str, date]]:
    return {(a.row.station_id, a.row.hour_start.date()) for a in anomalies}


def neighborhood_daily_report(anomalies: Sequence[AnomalyRecord], rows: Sequence[StationHourRow]) -> Table:
    """Percentage of active stations with at least one anomaly, per neighborhood and day.

    Days on which a neighborhood had no active station are left out.
    """
    active: dict[tuple[int, date], set[str]] = defaultdict(set)
    for r in rows:
        active[(r.neighborhood_id, r.hour_start.date())].add(r.station_id)
    flagged = _anomalous_station_days(anomalies)
    out = []
    for (nid, day), stations in sorted(active.items()):
        hit = sum((s, day) in flagged for s in stations)
        out.append((nid, day, day.day, len(stations), hit, 100.0 * hit / len(stations)))
    return Table(
        ("neighborhood_id", "date", "day_of_month", "active_stations", "anomalous_stations", "pct_anomalous"),
        tuple(out),
    )


def station_daily_counts(anomalies: Sequence[AnomalyRecord], rows: Sequence[StationHourRow]) -> Table:
    """Flagged rows per active station and day, zeros included."""
    counts = Counter((a.row.station_id, a.row.hour_start.date()) for a in anomalies)
    cells = sorted({(r.station_id, r.hour_start.date()) for r in rows})
    return Table(("station_id", "date", "anomaly_count"), tuple((s, d, counts[(s, d)]) for s, d in cells))


@dataclass(frozen=True)
class StationCounts:
    table: Table
    k: int
    map_export: dict

    @property
    def top(self) -> list[str]:
        return self.table.column("station_id")[: self.k]


def station_count_report(
    anomalies: Sequence[AnomalyRecord],
    k: int = 20,
    coordinates: Mapping[str, tuple[float, float]] | None = None,
) -> StationCounts:
    """Stations by descending anomaly count, ties by id; top ``k`` exported as points.

    ``coordinates`` maps station id to ``(lat, lon)``. A station without known
    coordinates is exported with a null geometry.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    counts = Counter(a.row.station_id for a in anomalies)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    table = Table(
        ("rank", "station_id", "anomaly_count"),
        tuple((i + 1, sid, n) for i, (sid, n) in enumerate(ranked)),
    )
    coordinates = coordinates or {}
    features = []
    for i, (sid, n) in enumerate(ranked[:k]):
        coord = coordinates.get(sid)
        geometry = None if coord is None else {"type": "Point", "coordinates": [coord[1], coord[0]]}
        features.append(
            {
                "type": "Feature",
                "geometry": geometry,
                "properties": {"station_id": sid, "anomaly_count": n, "rank": i + 1},
            }
        )
    return StationCounts(table, k, {"type": "FeatureCollection", "features": features})


# ---------------------------------------------------------------------------
# temporal


@dataclass(frozen=True)
class TemporalProfile:
    hourly: Table
    weekday: Table
    n_days: int
    peak_anomaly_hour: int | None
    peak_anomaly_weekday: int | None


def _mean_half_width(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) == 0:
        return 0.0, 0.0
    if len(arr) < 2:
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(Z_95 * arr.std(ddof=1) / math.sqrt(len(arr)))


def _argmax(counts: Sequence[int], labels: Sequence[int]) -> int | None:
    if not any(counts):
        return None
    return labels[int(np.argmax(counts))]


def temporal_profile(rows: Sequence[StationHourRow], anomalies: Sequence[AnomalyRecord]) -> TemporalProfile:
    """Hour-of-day and weekday trip profiles with 95% normal-approximation bands.

    Trips are counted once, at departure (outgoing loads). Hourly means are
    per day of data; weekday means are per date falling on that weekday.
    """
    days = sorted({r.hour_start.date() for r in rows})
    if len(days) < 2:
        logger.warning("temporal profile over %d day(s); confidence half-widths are 0", len(days))
    trips: dict[tuple[date, int], int] = defaultdict(int)
    for r in rows:
        if r.direction is Direction.OUTGOING:
            trips[(r.hour_start.date(), r.hour)] += r.traffic_load

    hour_hits = Counter(a.row.hour for a in anomalies)
    hourly = []
    for h in range(24):
        mean, half = _mean_half_width([trips[(d, h)] for d in days])
        hourly.append((h, len(days), mean, half, hour_hits[h]))

    daily_total = {d: sum(trips[(d, h)] for h in range(24)) for d in days}
    wd_hits = Counter(a.row.weekday for a in anomalies)
    weekday = []
    for w in range(7):
        dates = [d for d in days if d.weekday() == w]
        if not dates:
            continue
        mean, half = _mean_half_width([daily_total[d] for d in dates])
        weekday.append((w, WEEKDAY_NAMES[w], len(dates), mean, half, wd_hits[w]))

    hourly_t = Table(("hour", "n_days", "mean_trips", "half_width_95", "anomaly_count"), tuple(hourly))
    weekday_t = Table(
        ("weekday", "weekday_name", "n_days", "mean_trips", "half_width_95", "anomaly_count"), tuple(weekday)
    )
    return TemporalProfile(
        hourly_t,
        weekday_t,
        len(days),
        _argmax(hourly_t.column("anomaly_count"), hourly_t.column("hour")),
        _argmax(weekday_t.column("anomaly_count"), weekday_t.column("weekday")),
    )


# ---------------------------------------------------------------------------
# bundle


@dataclass(frozen=True)
class ReportBundle:
    neighborhood_daily: Table
    station_daily: Table
    station_counts: StationCounts
    temporal: TemporalProfile
    n_anomalies: int
    subset_rankings: dict[str, ImportanceVector] = field(default_factory=dict)

    @property
    def map_export(self) -> dict:
        return self.station_counts.map_export

    def check(self) -> None:
        pct = self.neighborhood_daily.column("pct_anomalous")
        if any(p < 0 or p > 100 for p in pct):
            raise AssertionError("percentage outside [0, 100]")
        if sum(self.station_counts.table.column("anomaly_count")) != self.n_anomalies:
            raise AssertionError("station counts do not add up to the anomaly total")
        for t in (self.temporal.hourly, self.temporal.weekday):
            if any(w < 0 for w in t.column("half_width_95")):
                raise AssertionError("negative confidence half-width")


def build_report(
    rows: Sequence[StationHourRow],
    anomalies: Sequence[AnomalyRecord],
    coordinates: Mapping[str, tuple[float, float]] | None = None,
    k: int = 20,
    rankings: Mapping[str, ImportanceVector] | None = None,
) -> ReportBundle:
    bundle = ReportBundle(
        neighborhood_daily_report(anomalies, rows),
        station_daily_counts(anomalies, rows),
        station_count_report(anomalies, k, coordinates),
        temporal_profile(rows, anomalies),
        len(anomalies),
        dict(rankings or {}),
    )
    bundle.check()
    return bundle


def write_bundle(bundle: ReportBundle, out_dir: str | Path) -> list[Path]:
    """Write every table, the ranking vectors and the map export; return the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str) -> None:
        path = out / name
        path.write_text(text, encoding="utf-8")
        written.append(path)

    put("neighborhood_daily.csv", bundle.neighborhood_daily.to_csv())
    put("station_daily.csv", bundle.station_daily.to_csv())
    put("station_counts.csv", bundle.station_counts.table.to_csv())
    put("temporal_hourly.csv", bundle.temporal.hourly.to_csv())
    put("temporal_weekday.csv", bundle.temporal.weekday.to_csv())
    put("top_stations.geojson", json.dumps(bundle.map_export, sort_keys=True, indent=2) + "\n")
    rankings = {name: vec.to_dict() for name, vec in sorted(bundle.subset_rankings.items())}
    put("rankings.json", json.dumps(rankings, sort_keys=True, indent=2) + "\n")
    summary = {
        "n_anomalies": bundle.n_anomalies,
        "n_days": bundle.temporal.n_days,
        "peak_anomaly_hour": bundle.temporal.peak_anomaly_hour,
        "peak_anomaly_weekday": bundle.temporal.peak_anomaly_weekday,
        "top_stations": bundle.station_counts.top,
    }
    put("summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return written
