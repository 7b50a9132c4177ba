"""Regenerate the small fixture files and their golden tables.

The golden station-hour table is computed here with plain Python, without
importing the package, so it serves as an independent oracle for the
aggregation and encoding code. Run from the repository root:

    python3 tests/fixtures/make_fixtures.py
"""

import csv
import json
import math
from datetime import datetime
from pathlib import Path

HERE = Path(__file__).resolve().parent
R_KM = 6371.0088

STATIONS = {
    "S001": (42.3601, -71.0589),  # inside neighborhood 1
    "S002": (42.3650, -71.0540),  # inside the hole of neighborhood 1
    "S003": (42.3480, -71.0720),  # inside neighborhood 2
}

# trip_id, start, end, from, to, user type
TRIPS = [
    ("T01", "2023-01-05 08:02:00", "2023-01-05 08:14:00", "S001", "S002", "Subscriber"),
    ("T02", "2023-01-05 08:05:00", "2023-01-05 08:20:00", "S001", "S002", "Subscriber"),
    ("T03", "2023-01-05 08:11:00", "2023-01-05 08:26:00", "S001", "S002", "Customer"),
    ("T04", "2023-01-05 08:20:00", "2023-01-05 08:33:00", "S001", "S002", "Subscriber"),
    ("T05", "2023-01-05 08:10:00", "2023-01-05 08:30:00", "S001", "S001", "Customer"),
    ("T06", "2023-01-05 08:15:00", "2023-01-05 08:29:00", "S002", "S001", "Subscriber"),
    ("T07", "2023-01-05 08:31:00", "2023-01-05 08:47:00", "S002", "S001", "Subscriber"),
    ("T08", "2023-01-05 08:40:00", "2023-01-05 09:05:00", "S001", "S003", "Subscriber"),
    ("T09", "2023-01-05 08:45:00", "2023-01-05 09:12:00", "S002", "S003", "Customer"),
    ("T10", "2023-01-05 08:50:00", "2023-01-05 09:20:00", "S001", "S003", "Subscriber"),
    ("T11", "2023-01-02 17:00:00", "2023-01-02 17:15:00", "S003", "S002", "Subscriber"),
    ("T12", "2023-01-02 17:05:00", "2023-01-02 17:22:00", "S003", "S002", "Subscriber"),
    ("T13", "2023-01-02 17:10:00", "2023-01-02 17:30:00", "S003", "S002", "Customer"),
    ("T14", "2023-01-02 17:20:00", "2023-01-02 17:38:00", "S003", "S002", "Subscriber"),
    ("T15", "2023-01-02 17:40:00", "2023-01-02 18:05:00", "S003", "S001", "Subscriber"),
    ("T16", "2023-01-02 17:45:00", "2023-01-02 18:10:00", "S003", "S001", "Customer"),
    ("T17", "2023-01-02 17:50:00", "2023-01-02 18:20:00", "S003", "S001", "Subscriber"),
    ("T18", "2023-01-02 17:25:00", "2023-01-02 17:45:00", "S003", "S002", "Subscriber"),
    ("T19", "2023-01-02 17:55:00", "2023-01-02 18:30:00", "S003", "S001", "Subscriber"),
    ("T20", "2023-01-02 17:30:00", "2023-01-02 17:50:00", "S003", "S002", "Customer"),
]

# time, temp, prcp, wspd, coco; 2023-01-02 18:00 is deliberately missing
WEATHER = [
    ("2023-01-02 16:00:00", -1.5, 0.0, 12.2, 3),
    ("2023-01-02 17:00:00", -2.0, 0.0, 14.8, 3),
    ("2023-01-05 07:00:00", 1.0, 0.0, 9.0, 2),
    ("2023-01-05 08:00:00", 1.5, 0.3, 10.4, 7),
    ("2023-01-05 09:00:00", 2.1, 0.0, 11.0, 4),
]

DEG_PER_M = 180.0 / math.pi / (R_KM * 1000.0)
STOPS = [
    ("P1", 42.3601 + 100 * DEG_PER_M, -71.0589),
    ("P2", 42.3601 + 250 * DEG_PER_M, -71.0589),
    ("P3", 42.3601 + 400 * DEG_PER_M, -71.0589),
    ("P4", 42.3650 - 50 * DEG_PER_M, -71.0540),
]

NEIGHBORHOODS = {
    "type": "FeatureCollection",
    "features": [
        {
            "type": "Feature",
            "properties": {"neighborhood_id": 1, "name": "Harborview"},
            "geometry": {
                "type": "Polygon",
                "coordinates": [
                    [[-71.070, 42.355], [-71.050, 42.355], [-71.050, 42.370], [-71.070, 42.370], [-71.070, 42.355]],
                    [[-71.056, 42.363], [-71.052, 42.363], [-71.052, 42.367], [-71.056, 42.367], [-71.056, 42.363]],
                ],
            },
        },
        {
            "type": "Feature",
            "properties": {"neighborhood_id": 2, "name": "Southgate"},
            "geometry": {
                "type": "Polygon",
                "coordinates": [
                    [[-71.080, 42.340], [-71.065, 42.340], [-71.065, 42.352], [-71.080, 42.352], [-71.080, 42.340]]
                ],
            },
        },
    ],
}
NEIGHBORHOOD_OF = {"S001": 1, "S002": -1, "S003": 2}  # by construction, see comments above
HOLIDAYS = ["2023-01-02"]

TRIP_HEADER = [
    "trip_id", "tripduration", "starttime", "stoptime",
    "start station id", "start station latitude", "start station longitude",
    "end station id", "end station latitude", "end station longitude", "usertype",
]
COLUMNS = [
    "traffic_load", "direction", "avg_distance_km", "avg_duration_min", "avg_speed_kmh", "subscriber_ratio",
    "hour", "day_of_month", "weekday", "is_holiday", "avg_temp", "avg_precip", "avg_wind", "coco",
    "nearby_transit_stops", "neighborhood_id",
]
INTS = {"traffic_load", "direction", "hour", "day_of_month", "weekday", "is_holiday", "coco",
        "nearby_transit_stops", "neighborhood_id"}


def great_circle_km(a, b):
    (la1, lo1), (la2, lo2) = a, b
    p1, p2 = math.radians(la1), math.radians(la2)
    dp, dl = p2 - p1, math.radians(lo2 - lo1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * R_KM * math.asin(math.sqrt(h))


def ts(text):
    return datetime.strptime(text, "%Y-%m-%d %H:%M:%S")


def trip_rows(trips):
    out = []
    for tid, start, end, a, b, user in trips:
        secs = int((ts(end) - ts(start)).total_seconds())
        out.append([tid, secs, start, end, a, *STATIONS[a], b, *STATIONS[b], user])
    return out


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def golden():
    cells = {}
    for tid, start, end, a, b, user in TRIPS:
        s, e = ts(start), ts(end)
        secs = (e - s).total_seconds()
        dist = great_circle_km(STATIONS[a], STATIONS[b])
        speed = min(dist / (secs / 3600.0), 99.0)
        rec = (dist, secs, speed, user == "Subscriber")
        cells.setdefault((a, s.replace(minute=0, second=0), 1), []).append(rec)
        cells.setdefault((b, e.replace(minute=0, second=0), 0), []).append(rec)
    weather = {ts(t): (temp, p, w, c) for t, temp, p, w, c in WEATHER}
    stops_near = {
        sid: sum(great_circle_km(xy, (lat, lon)) * 1000 <= 300 for _, lat, lon in STOPS)
        for sid, xy in STATIONS.items()
    }
    rows = []
    for (sid, hour, direction) in sorted(cells, key=lambda k: (k[0], k[1], k[2])):
        recs = cells[(sid, hour, direction)]
        n = len(recs)
        known = sorted(h for h in weather if h <= hour)
        temp, precip, wind, coco = weather[known[-1]]
        rows.append({
            "station_id": sid,
            "hour_start": hour.strftime("%Y-%m-%d %H:%M:%S"),
            "traffic_load": n,
            "direction": direction,
            "avg_distance_km": sum(r[0] for r in recs) / n,
            "avg_duration_min": sum(r[1] for r in recs) / n / 60.0,
            "avg_speed_kmh": sum(r[2] for r in recs) / n,
            "subscriber_ratio": sum(r[3] for r in recs) / n,
            "hour": hour.hour,
            "day_of_month": hour.day,
            "weekday": hour.weekday(),
            "is_holiday": int(hour.strftime("%Y-%m-%d") in HOLIDAYS),
            "avg_temp": temp,
            "avg_precip": precip,
            "avg_wind": wind,
            "coco": coco,
            "nearby_transit_stops": stops_near[sid],
            "neighborhood_id": NEIGHBORHOOD_OF[sid],
        })
    return rows


def main():
    write_csv(HERE / "trips_20.csv", TRIP_HEADER, trip_rows(TRIPS))
    bad = trip_rows(TRIPS[:18])
    bad.insert(5, ["X01", 600, "2023-01-05 8h", "2023-01-05 08:40:00", "S001", *STATIONS["S001"],
                   "S002", *STATIONS["S002"], "Subscriber"])
    bad.insert(12, ["X02", 600, "2023-01-05 08:30:00", "2023-01-05 08:40:00", "", *STATIONS["S001"],
                    "S002", *STATIONS["S002"], "Subscriber"])
    write_csv(HERE / "trips_malformed.csv", TRIP_HEADER, bad)
    write_csv(HERE / "weather.csv", ["time", "temp", "prcp", "wspd", "coco"], WEATHER)
    write_csv(HERE / "stops.txt", ["stop_id", "stop_name", "stop_lat", "stop_lon"],
              [(sid, f"Stop {sid}", repr(lat), repr(lon)) for sid, lat, lon in STOPS])
    (HERE / "neighborhoods.geojson").write_text(json.dumps(NEIGHBORHOODS, indent=1) + "\n", encoding="utf-8")
    (HERE / "holidays.txt").write_text("# fixture calendar\n" + "".join(d + "\n" for d in HOLIDAYS), encoding="utf-8")

    rows = golden()
    write_csv(
        HERE / "golden_station_rows.csv",
        ["station_id", "hour_start"] + COLUMNS,
        [[r["station_id"], r["hour_start"]] + [r[c] if c in INTS else f"{r[c]:.6f}" for c in COLUMNS] for r in rows],
    )
    write_csv(HERE / "golden_matrix.csv", COLUMNS, [[f"{float(r[c]):.6f}" for c in COLUMNS] for r in rows])


if __name__ == "__main__":
    main()
