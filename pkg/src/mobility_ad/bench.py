"""Detection/explanation quality against planted labels, and explanation timing."""

from __future__ import annotations

import os
import platform
import time
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.metrics import roc_auc_score

from .analysis import AnomalyRecord, DetectConfig, DetectionResult, two_stage_detect
from .diffi import local_diffi
from .features import StationHourRow, aggregate_station_hours, encode_features, trip_feature_matrix
from .iforest import ForestModel
from .synth import CellKey, SynthDataset


@dataclass(frozen=True)
class Metrics:
    n_rows: int
    n_planted: int
    n_flagged: int
    auroc: float
    precision: float
    recall: float
    contamination: float
    n_detected_planted: int
    explanation_top1: float
    explanation_top2: float

    def to_dict(self) -> dict:
        return asdict(self)


def auroc(labels: Sequence[bool], scores: Sequence[float]) -> float:
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise ValueError("AUROC needs both planted and normal rows")
    return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


def evaluate(
    labels: Mapping[CellKey, str | None],
    rows: Sequence[StationHourRow],
    scores: Sequence[float],
    flags: Sequence[bool],
    anomalies: Sequence[AnomalyRecord],
    contamination: float,
) -> Metrics:
    """Score pipeline output against ground truth.

    Rows are matched to labels by (station, hour, direction), so the order of
    the pipeline output does not matter.
    """
    keys = [r.key for r in rows]
    if len(set(keys)) != len(keys) or set(keys) != set(labels):
        raise ValueError("pipeline rows and ground-truth labels cover different cells")
    order = sorted(range(len(keys)), key=lambda i: keys[i])
    truth = np.array([labels[keys[i]] is not None for i in order])
    s = np.asarray(scores, dtype=np.float64)[order]
    f = np.asarray(flags, dtype=bool)[order]

    tp = int(np.sum(truth & f))
    hits1 = hits2 = 0
    detected = [a for a in anomalies if labels[a.row.key] is not None]
    for a in detected:
        ranked = a.importance.ranked_names()
        cause = labels[a.row.key]
        hits1 += ranked[0] == cause
        hits2 += cause in ranked[:2]
    n_det = len(detected)
    return Metrics(
        n_rows=len(keys),
        n_planted=int(truth.sum()),
        n_flagged=int(f.sum()),
        auroc=auroc(truth, s),
        precision=tp / f.sum() if f.any() else 0.0,
        recall=tp / truth.sum() if truth.any() else 0.0,
        contamination=contamination,
        n_detected_planted=n_det,
        explanation_top1=hits1 / n_det if n_det else 0.0,
        explanation_top2=hits2 / n_det if n_det else 0.0,
    )


def run_synthetic(dataset: SynthDataset, config: DetectConfig) -> tuple[DetectionResult, Metrics, list[StationHourRow]]:
    """Featurize, detect and evaluate one synthetic dataset end to end."""
    rows = aggregate_station_hours(
        dataset.trips, dataset.weather, dataset.stops, dataset.polygons, dataset.holidays
    )
    matrix = encode_features(rows)
    result = two_stage_detect(trip_feature_matrix(dataset.trips), matrix, config)
    metrics = evaluate(dataset.labels, rows, result.scores, result.flags, result.anomalies, result.contamination)
    return result, metrics, rows


def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    return f"{platform.system()} {platform.release()} {cpu} x{os.cpu_count()} / Python {platform.python_version()}"


@dataclass(frozen=True)
class TimingReport:
    n_samples: int
    repetitions: int
    n_trees: int
    subsample_size: int
    mean_seconds: float
    p95_seconds: float
    hardware: str

    def to_dict(self) -> dict:
        return asdict(self)


def benchmark_local_diffi(model: ForestModel, rows, repetitions: int = 3) -> TimingReport:
    """Wall-clock time of one Local-DIFFI explanation, per sample."""
    data = np.asarray(getattr(rows, "values", rows), dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("benchmark needs at least one row")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    times = []
    for _ in range(repetitions):
        for row in data:
            t0 = time.perf_counter()
            local_diffi(model, row)
            times.append(time.perf_counter() - t0)
    arr = np.asarray(times)
    return TimingReport(
        n_samples=len(data),
        repetitions=repetitions,
        n_trees=model.n_trees,
        subsample_size=model.subsample_size,
        mean_seconds=float(arr.mean()),
        p95_seconds=float(np.percentile(arr, 95)),
        hardware=hardware_descriptor(),
    )
