"""Command-line entry point: ``mobility-ad <command> [options]``.

Each command reads the artifacts of earlier stages from the output directory
and writes its own stage directory with a ``manifest.json``::

    ingest     -> <out>/ingest/     normalized sources, rejects, station registry
    featurize  -> <out>/features/   station-hour rows and numeric matrices
    detect     -> <out>/detect/     forest, scores, anomalies with Local-DIFFI
    explain    -> <out>/explain/    subset rankings for predicates
    report     -> <out>/report/     tables, map export and SVG figures
    synth      -> <out>/synth/      a labeled synthetic month
    bench      -> <out>/bench/      quality metrics over seeds and timing

Exit codes: 0 success, 1 unexpected failure, 2 usage or configuration error,
3 missing stage input, 4 data or schema error, 5 empty predicate selection,
6 output directory locked by another run.

Log verbosity comes from the ``MOBILITY_AD_LOG_LEVEL`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .analysis import AnomalyRecord, DetectConfig, EmptySelectionError, Predicate, subset_explain, two_stage_detect
from .artifacts import LockHeldError, OutputLock, write_manifest
from .bench import benchmark_local_diffi, run_synthetic
from .diffi import ImportanceVector, NoOutliersError, global_diffi
from .features import (
    aggregate_station_hours,
    encode_features,
    matrix_to_csv,
    read_rows_csv,
    trip_feature_matrix,
    write_rows_csv,
)
from .geo_ingest import (
    BLUEBIKES_2023_SCHEMA,
    HolidayCalendar,
    IngestError,
    TripSchema,
    format_timestamp,
    parse_holidays,
    parse_neighborhoods,
    parse_stops,
    parse_trips,
    parse_weather,
    station_registry,
    write_holidays,
    write_neighborhoods,
    write_rejects,
    write_station_conflicts,
    write_stops,
    write_trips,
    write_weather,
)
from .plots import render_plots
from .reports import build_report, write_bundle
from .synth import SynthConfig, generate

logger = logging.getLogger("mobility_ad")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_DATA = 4
EXIT_EMPTY_SELECTION = 5
EXIT_LOCKED = 6

LOG_ENV = "MOBILITY_AD_LOG_LEVEL"
SOURCES = ("trips", "weather", "stops", "neighborhoods", "holidays")
TRIP_SCHEMAS = {"default": TripSchema(), "bluebikes-2023": BLUEBIKES_2023_SCHEMA}


class UsageError(Exception):
    pass


class MissingInputError(Exception):
    pass


@dataclass
class RunConfig:
    out: str = "mobility_ad_run"
    seed: int = 0
    n_trees: int = 100
    subsample_size: int = 256
    contamination: float | None = None
    trips: str | None = None
    weather: str | None = None
    stops: str | None = None
    neighborhoods: str | None = None
    holidays: str | None = None
    # "default", "bluebikes-2023" or a mapping of TripSchema fields to column names
    trip_schema: str | dict = "default"
    radius_m: float = 300.0
    top_k: int = 20
    predicates: list[str] = field(default_factory=lambda: ["hour==8 and weekday==3"])
    synth: dict = field(default_factory=dict)
    bench_seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    bench_repetitions: int = 3
    bench_timing_rows: int = 20

    def __post_init__(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise UsageError("seed must be a non-negative integer")
        if self.n_trees < 1 or self.subsample_size < 1:
            raise UsageError("--trees and --subsample must be positive")
        if self.contamination is not None and not 0 < self.contamination < 1:
            raise UsageError("--contamination must lie strictly between 0 and 1")

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    def schema(self) -> TripSchema:
        if isinstance(self.trip_schema, dict):
            return TripSchema.from_mapping(self.trip_schema)
        if self.trip_schema not in TRIP_SCHEMAS:
            raise UsageError(f"unknown trip schema {self.trip_schema!r}; use one of {sorted(TRIP_SCHEMAS)} or a mapping")
        return TRIP_SCHEMAS[self.trip_schema]

    def detect_config(self) -> DetectConfig:
        return DetectConfig(self.n_trees, self.subsample_size, self.seed, self.contamination)

    def recorded(self, *keys: str) -> dict:
        """Config values that shape a stage's output (never the output path)."""
        doc = asdict(self)
        return {k: doc[k] for k in keys}


# ---------------------------------------------------------------------------
# helpers


def _stage_dir(cfg: RunConfig, name: str) -> Path:
    path = Path(cfg.out) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"missing {path}; run `mobility-ad {producer}` first")
    return path


def _json_dump(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_") or "all"


def _load_rows(cfg: RunConfig):
    return read_rows_csv(_require(Path(cfg.out) / "features" / "station_rows.csv", "featurize"))


def _load_anomalies(cfg: RunConfig, rows) -> list[AnomalyRecord]:
    doc = json.loads(_require(Path(cfg.out) / "detect" / "anomalies.json", "detect").read_text(encoding="utf-8"))
    out = []
    for rec in doc["anomalies"]:
        i = rec["row_index"]
        if i >= len(rows) or rows[i].station_id != rec["station_id"]:
            raise MissingInputError("detect outputs do not match the feature table; rerun `mobility-ad detect`")
        out.append(
            AnomalyRecord(rows[i], i, rec["anomaly_score"], doc["threshold"], ImportanceVector.from_dict(rec["importance"]))
        )
    return out


def _load_coordinates(cfg: RunConfig) -> dict[str, tuple[float, float]]:
    path = _require(Path(cfg.out) / "ingest" / "stations.csv", "ingest")
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["station_id"]: (float(r["lat"]), float(r["lon"])) for r in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig) -> Path:
    if cfg.trips is None or cfg.weather is None:
        raise UsageError("ingest needs at least --trips and --weather (or the same keys in --config)")
    sources = {name: getattr(cfg, name) for name in SOURCES if getattr(cfg, name) is not None}
    for name, p in sources.items():
        if not Path(p).is_file():
            raise MissingInputError(f"{name} file not found: {p}")
    stage = _stage_dir(cfg, "ingest")

    trips, trip_rej = parse_trips(sources["trips"], cfg.schema())
    if not trips:
        raise IngestError(f"every trip row was rejected ({len(trip_rej)} rows); check the trip schema")
    weather, weather_rej = parse_weather(sources["weather"])
    stops, stop_rej = parse_stops(sources["stops"]) if "stops" in sources else ([], [])
    polygons, poly_rej = parse_neighborhoods(sources["neighborhoods"]) if "neighborhoods" in sources else ([], [])
    holidays, hol_rej = parse_holidays(sources["holidays"]) if "holidays" in sources else (HolidayCalendar(frozenset()), [])
    for name in ("stops", "neighborhoods", "holidays"):
        if name not in sources:
            logger.warning("no %s file given; the related features will be constant", name)
    coords, conflicts = station_registry(trips)

    outputs = [stage / "trips.csv", stage / "weather.csv", stage / "stops.csv", stage / "neighborhoods.geojson",
               stage / "holidays.txt", stage / "stations.csv", stage / "station_conflicts.csv"]
    write_trips(trips, outputs[0])
    write_weather(weather, outputs[1])
    write_stops(stops, outputs[2])
    write_neighborhoods(polygons, outputs[3])
    write_holidays(holidays, outputs[4])
    with open(outputs[5], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("station_id", "lat", "lon"))
        for sid in sorted(coords):
            w.writerow([sid, *coords[sid]])
    write_station_conflicts(conflicts, outputs[6])
    rejects = {"trips": trip_rej, "weather": weather_rej, "stops": stop_rej,
               "neighborhoods": poly_rej, "holidays": hol_rej}
    for name, rej in rejects.items():
        path = stage / f"rejects_{name}.csv"
        write_rejects(rej, path)
        outputs.append(path)
        if rej:
            logger.warning("%d %s row(s) rejected; see %s", len(rej), name, path)
    counts = {
        "trips": len(trips), "weather_hours": len(weather), "stops": len(stops),
        "neighborhoods": len(polygons), "holidays": len(holidays.dates), "stations": len(coords),
        "station_conflicts": len(conflicts),
        "rejected": {name: len(rej) for name, rej in rejects.items()},
    }
    schema = cfg.trip_schema if isinstance(cfg.trip_schema, str) else dict(sorted(cfg.trip_schema.items()))
    return write_manifest(stage, "ingest", cfg.out, sources, outputs, {"trip_schema": schema}, {"counts": counts})


def cmd_featurize(cfg: RunConfig) -> Path:
    src = Path(cfg.out) / "ingest"
    inputs = {name: _require(src / fname, "ingest") for name, fname in (
        ("trips", "trips.csv"), ("weather", "weather.csv"), ("stops", "stops.csv"),
        ("neighborhoods", "neighborhoods.geojson"), ("holidays", "holidays.txt"))}
    trips, _ = parse_trips(inputs["trips"])
    weather, _ = parse_weather(inputs["weather"])
    stops, _ = parse_stops(inputs["stops"])
    polygons, _ = parse_neighborhoods(inputs["neighborhoods"])
    holidays, _ = parse_holidays(inputs["holidays"])
    rows = aggregate_station_hours(trips, weather, stops, polygons, holidays, cfg.radius_m)
    station = encode_features(rows)
    trip_mx = trip_feature_matrix(trips)

    stage = _stage_dir(cfg, "features")
    outputs = [stage / "station_rows.csv", stage / "station_matrix.npy", stage / "station_matrix.csv",
               stage / "trip_matrix.npy", stage / "code_maps.json"]
    write_rows_csv(rows, outputs[0])
    np.save(outputs[1], station.values)
    outputs[2].write_text(matrix_to_csv(station), encoding="utf-8")
    np.save(outputs[3], trip_mx.values)
    maps = {name: [[k, v] for k, v in m.items()] for name, m in station.code_maps.items()}
    _json_dump({"columns": list(station.column_names), "code_maps": maps}, outputs[4])
    return write_manifest(stage, "featurize", cfg.out, inputs, outputs, cfg.recorded("radius_m"),
                          {"n_rows": len(rows), "n_trips": len(trips)})


def cmd_detect(cfg: RunConfig) -> Path:
    feat = Path(cfg.out) / "features"
    inputs = {"station_rows": _require(feat / "station_rows.csv", "featurize"),
              "trip_matrix": _require(feat / "trip_matrix.npy", "featurize")}
    rows = read_rows_csv(inputs["station_rows"])
    station = encode_features(rows)
    trip_values = np.load(inputs["trip_matrix"])
    result = two_stage_detect(trip_values, station, cfg.detect_config())

    stage = _stage_dir(cfg, "detect")
    outputs = [stage / "model.json", stage / "scores.csv", stage / "anomalies.csv",
               stage / "anomalies.json", stage / "global_importance.json"]
    result.model.save(outputs[0])
    with open(outputs[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("row_index", "station_id", "hour_start", "direction", "anomaly_score", "flagged"))
        for i, (r, s, f) in enumerate(zip(rows, result.scores, result.flags)):
            w.writerow([i, r.station_id, format_timestamp(r.hour_start), r.direction.label, repr(float(s)), int(f)])
    with open(outputs[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("row_index", "station_id", "hour_start", "direction", "anomaly_score", "top1", "top2", "top3"))
        for a in result.anomalies:
            w.writerow([a.row_index, a.row.station_id, format_timestamp(a.row.hour_start), a.row.direction.label,
                        repr(a.anomaly_score), *a.importance.top(3)])
    _json_dump(
        {
            "threshold": result.threshold,
            "anomalies": [
                {"row_index": a.row_index, "station_id": a.row.station_id, "anomaly_score": a.anomaly_score,
                 "importance": a.importance.to_dict()}
                for a in result.anomalies
            ],
        },
        outputs[3],
    )
    try:
        gfi = global_diffi(result.model, station, result.threshold, result.scores).to_dict()
    except NoOutliersError as exc:
        logger.warning("global importance skipped: %s", exc)
        gfi = None
    _json_dump({"global": gfi}, outputs[4])
    extra = {
        "contamination": result.contamination,
        "contamination_source": result.contamination_source,
        "stage1_fraction": result.stage1_fraction,
        "threshold": result.threshold,
        "n_rows": len(rows),
        "n_anomalies": len(result.anomalies),
    }
    config = cfg.recorded("seed", "n_trees", "subsample_size", "contamination")
    return write_manifest(stage, "detect", cfg.out, inputs, outputs, config, extra)


def _subset_rankings(anomalies, predicates: Sequence[str], strict: bool) -> dict[str, ImportanceVector]:
    out = {}
    for text in predicates:
        pred = Predicate.parse(text)
        try:
            out[pred.name] = subset_explain(anomalies, pred)
        except EmptySelectionError as exc:
            if strict:
                raise
            logger.warning("%s", exc)
    return out


def cmd_explain(cfg: RunConfig, predicates: Sequence[str] | None = None) -> Path:
    predicates = list(predicates or cfg.predicates)
    if not predicates:
        raise UsageError("explain needs at least one --predicate")
    try:
        parsed = [Predicate.parse(p) for p in predicates]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = _load_rows(cfg)
    anomalies = _load_anomalies(cfg, rows)
    rankings = _subset_rankings(anomalies, predicates, strict=True)
    stage = _stage_dir(cfg, "explain")
    outputs = []
    for pred in parsed:
        path = stage / f"{_slug(pred.name)}.json"
        path.write_text(rankings[pred.name].to_json(), encoding="utf-8")
        outputs.append(path)
    inputs = {"station_rows": Path(cfg.out) / "features" / "station_rows.csv",
              "anomalies": Path(cfg.out) / "detect" / "anomalies.json"}
    return write_manifest(stage, "explain", cfg.out, inputs, outputs, {"predicates": [p.name for p in parsed]})


def cmd_report(cfg: RunConfig) -> Path:
    rows = _load_rows(cfg)
    anomalies = _load_anomalies(cfg, rows)
    coords = _load_coordinates(cfg)
    rankings = _subset_rankings(anomalies, cfg.predicates, strict=False)
    gpath = _require(Path(cfg.out) / "detect" / "global_importance.json", "detect")
    gdoc = json.loads(gpath.read_text(encoding="utf-8"))["global"]
    if gdoc is not None:
        rankings["global"] = ImportanceVector.from_dict(gdoc)
    bundle = build_report(rows, anomalies, coords, cfg.top_k, rankings)
    stage = _stage_dir(cfg, "report")
    outputs = write_bundle(bundle, stage) + render_plots(bundle, stage)
    inputs = {"station_rows": Path(cfg.out) / "features" / "station_rows.csv",
              "anomalies": Path(cfg.out) / "detect" / "anomalies.json",
              "global_importance": gpath,
              "stations": Path(cfg.out) / "ingest" / "stations.csv"}
    return write_manifest(stage, "report", cfg.out, inputs, outputs, cfg.recorded("top_k", "predicates"))


def _synth_config(cfg: RunConfig, seed: int, path: str | None = None) -> SynthConfig:
    doc = json.loads(Path(path).read_text(encoding="utf-8")) if path else dict(cfg.synth)
    doc["seed"] = seed
    try:
        return SynthConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth configuration: {exc}") from None


def cmd_synth(cfg: RunConfig, synth_config: str | None = None) -> Path:
    inputs = {}
    if synth_config:
        inputs["synth_config"] = _require(Path(synth_config), "synth")
    dataset = generate(_synth_config(cfg, cfg.seed, synth_config))
    stage = _stage_dir(cfg, "synth")
    paths = dataset.write(stage)
    extra = {"n_trips": len(dataset.trips), "n_cells": len(dataset.labels), "n_planted": len(dataset.planted)}
    return write_manifest(stage, "synth", cfg.out, inputs, paths.values(), {"seed": cfg.seed}, extra)


def cmd_bench(cfg: RunConfig, synth_config: str | None = None) -> Path:
    if not cfg.bench_seeds:
        raise UsageError("bench needs at least one seed")
    stage = _stage_dir(cfg, "bench")
    per_seed = []
    timing = None
    for s in cfg.bench_seeds:
        dataset = generate(_synth_config(cfg, s, synth_config))
        detect = DetectConfig(cfg.n_trees, cfg.subsample_size, s, cfg.contamination)
        result, metrics, rows = run_synthetic(dataset, detect)
        per_seed.append({"seed": s, **metrics.to_dict()})
        if timing is None:
            sample = encode_features(rows[: cfg.bench_timing_rows])
            timing = benchmark_local_diffi(result.model, sample, cfg.bench_repetitions)
        logger.info("seed %d: AUROC %.3f recall %.3f", s, metrics.auroc, metrics.recall)
    keys = [k for k in per_seed[0] if k != "seed"]
    mean = {k: float(np.mean([m[k] for m in per_seed])) for k in keys}
    metrics_csv = stage / "metrics.csv"
    with open(metrics_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", *keys])
        for m in per_seed:
            w.writerow([m["seed"], *(m[k] for k in keys)])
    metrics_json = _json_dump({"per_seed": per_seed, "mean": mean}, stage / "metrics.json")
    # wall-clock timings differ run to run; keep them apart from the reproducible metrics
    timing_json = _json_dump(timing.to_dict(), stage / "timing.json")
    config = cfg.recorded("n_trees", "subsample_size", "contamination", "bench_seeds", "bench_repetitions",
                          "bench_timing_rows", "synth")
    return write_manifest(stage, "bench", cfg.out, {}, [metrics_csv, metrics_json, timing_json], config)


# ---------------------------------------------------------------------------
# argument parsing


def _global_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON run configuration; flags override its keys")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--out", help="output directory holding the stage directories")
    p.add_argument("--contamination", type=float, help="fixed contamination; skips stage-1 tuning")
    p.add_argument("--trees", type=int, dest="n_trees", help="number of isolation trees (default 100)")
    p.add_argument("--subsample", type=int, dest="subsample_size", help="rows per tree (default 256)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_options()
    parser = argparse.ArgumentParser(
        prog="mobility-ad",
        description="Explainable anomaly detection for bike-sharing station traffic.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    ingest = sub.add_parser("ingest", parents=[common], help="parse and validate the source files")
    for name in SOURCES:
        ingest.add_argument(f"--{name}", help=f"{name} file")
    ingest.add_argument("--trip-schema", dest="trip_schema", help="default or bluebikes-2023")

    sub.add_parser("featurize", parents=[common], help="aggregate trips into station-hour rows")
    sub.add_parser("detect", parents=[common], help="two-stage detection with Local-DIFFI")
    explain = sub.add_parser("explain", parents=[common], help="mean Local-DIFFI over a subset of anomalies")
    explain.add_argument("--predicate", action="append", dest="predicate_args",
                         help="e.g. 'hour==8 and weekday==3' (repeatable; 'all' selects every anomaly)")
    sub.add_parser("report", parents=[common], help="spatial/temporal tables and SVG figures")
    for name, text in (("synth", "generate a labeled synthetic month"),
                       ("bench", "detection and explanation quality on synthetic data")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--synth-config", dest="synth_config", help="JSON file with SynthConfig fields")
    return parser


_FLAG_KEYS = ("seed", "out", "contamination", "n_trees", "subsample_size", "trip_schema") + SOURCES


def config_from_args(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
    for key in _FLAG_KEYS:
        if getattr(args, key, None) is not None:
            doc[key] = getattr(args, key)
    return RunConfig.from_dict(doc)


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _run(args: argparse.Namespace, cfg: RunConfig) -> Path:
    command = args.command
    if command == "ingest":
        return cmd_ingest(cfg)
    if command == "featurize":
        return cmd_featurize(cfg)
    if command == "detect":
        return cmd_detect(cfg)
    if command == "explain":
        return cmd_explain(cfg, getattr(args, "predicate_args", None))
    if command == "report":
        return cmd_report(cfg)
    if command == "synth":
        return cmd_synth(cfg, getattr(args, "synth_config", None))
    return cmd_bench(cfg, getattr(args, "synth_config", None))


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = config_from_args(args)
        with OutputLock(cfg.out):
            manifest = _run(args, cfg)
    except UsageError as exc:
        print(f"mobility-ad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingInputError as exc:
        print(f"mobility-ad: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except LockHeldError as exc:
        print(f"mobility-ad: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except EmptySelectionError as exc:
        print(f"mobility-ad: {exc}", file=sys.stderr)
        return EXIT_EMPTY_SELECTION
    except (IngestError, ValueError) as exc:
        print(f"mobility-ad: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.debug("unexpected failure", exc_info=True)
        print(f"mobility-ad: unexpected error: {exc!r}", file=sys.stderr)
        return EXIT_FAILURE
    print(manifest)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
