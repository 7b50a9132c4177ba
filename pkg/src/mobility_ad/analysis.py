"""Two-stage detection and subset explanations.

Stage 1 fits a forest on individual trips (duration, distance, speed) to pick
the contamination: the share of trips whose score exceeds 0.5, clipped to
``[0.01, 0.15]``. Stage 2 fits a forest on the station-hour matrix, flags the
top ``contamination`` share of rows and explains each flagged row with
Local-DIFFI.
"""

from __future__ import annotations

import logging
import operator
import re
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .diffi import ImportanceVector, aggregate_local, local_diffi_batch, ImportanceKind
from .features import FEATURE_COLUMNS, FeatureMatrix, StationHourRow
from .iforest import ForestModel, anomaly_scores, fit, threshold_by_contamination

logger = logging.getLogger(__name__)

CONTAMINATION_FLOOR = 0.01
CONTAMINATION_CEILING = 0.15
NATURAL_THRESHOLD = 0.5


@dataclass(frozen=True)
class DetectConfig:
    n_trees: int = 100
    subsample_size: int = 256
    seed: int = 0
    contamination: float | None = None


@dataclass(frozen=True)
class AnomalyRecord:
    row: StationHourRow
    row_index: int
    anomaly_score: float
    threshold: float
    importance: ImportanceVector

    def __post_init__(self) -> None:
        if not self.anomaly_score > self.threshold:
            raise ValueError("an anomaly must score above the threshold")
        if self.importance.kind is not ImportanceKind.LOCAL:
            raise ValueError("anomalies carry local importances")


@dataclass
class DetectionResult:
    contamination: float
    contamination_source: str  # "override" or "stage1"
    stage1_fraction: float | None
    threshold: float
    model: ForestModel
    scores: np.ndarray
    flags: np.ndarray
    anomalies: list[AnomalyRecord] = field(default_factory=list)
    stage1_model: ForestModel | None = None


def tune_contamination(trip_matrix: FeatureMatrix | np.ndarray, config: DetectConfig) -> tuple[float, float, ForestModel]:
    """Stage 1: share of trips scoring above 0.5, clipped."""
    model = fit(trip_matrix, config.n_trees, config.subsample_size, config.seed)
    scores = anomaly_scores(model, trip_matrix)
    fraction = float(np.mean(scores > NATURAL_THRESHOLD))
    if fraction == 0:
        logger.warning("no trip scored above %.1f; using contamination %.2f", NATURAL_THRESHOLD, CONTAMINATION_FLOOR)
    return float(np.clip(fraction, CONTAMINATION_FLOOR, CONTAMINATION_CEILING)), fraction, model


def two_stage_detect(
    trip_matrix: FeatureMatrix | np.ndarray | None,
    station_matrix: FeatureMatrix,
    config: DetectConfig = DetectConfig(),
) -> DetectionResult:
    """Run both stages; an explicit ``config.contamination`` skips stage 1."""
    if station_matrix.shape[0] == 0:
        raise ValueError("station-hour matrix is empty")
    stage1_fraction = None
    stage1_model = None
    if config.contamination is not None:
        contamination, source = config.contamination, "override"
    else:
        if trip_matrix is None or np.shape(getattr(trip_matrix, "values", trip_matrix))[0] == 0:
            raise ValueError("trip matrix is empty; pass a contamination override instead")
        contamination, stage1_fraction, stage1_model = tune_contamination(trip_matrix, config)
        source = "stage1"

    model = fit(station_matrix, config.n_trees, config.subsample_size, config.seed)
    scores = anomaly_scores(model, station_matrix)
    threshold, flags = threshold_by_contamination(scores, contamination)
    flagged = np.flatnonzero(flags)
    local = local_diffi_batch(model, station_matrix.values[flagged]) if len(flagged) else np.zeros((0, 0))
    records = []
    for j, i in enumerate(flagged):
        row = station_matrix.rows[i]
        vec = ImportanceVector(local[j], model.column_names, ImportanceKind.LOCAL, _row_subject(row))
        records.append(AnomalyRecord(row, int(i), float(scores[i]), threshold, vec))
    return DetectionResult(
        contamination, source, stage1_fraction, threshold, model, scores, flags, records, stage1_model
    )


def _row_subject(row: StationHourRow) -> str:
    return f"{row.station_id}@{row.hour_start.isoformat()}/{row.direction.label}"


# ---------------------------------------------------------------------------
# predicates

_OPS = {
    "==": operator.eq,
    "!=": operator.ne,
    "<=": operator.le,
    ">=": operator.ge,
    "<": operator.lt,
    ">": operator.gt,
}
_CLAUSE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(==|!=|<=|>=|<|>|=)\s*(\S+)\s*$")
PREDICATE_FIELDS = FEATURE_COLUMNS + ("station_id",)


@dataclass(frozen=True)
class Clause:
    field: str
    op: str
    value: float | str

    def __call__(self, row: StationHourRow) -> bool:
        actual = getattr(row, self.field)
        if self.field == "station_id":
            return _OPS[self.op](actual, self.value)
        return _OPS[self.op](float(actual), float(self.value))

    def __str__(self) -> str:
        v = self.value
        if isinstance(v, float) and v.is_integer():
            v = int(v)
        return f"{self.field}{self.op}{v}"


@dataclass(frozen=True)
class Predicate:
    """Conjunction of field comparisons, e.g. ``hour==8 and weekday==3``."""

    clauses: tuple[Clause, ...] = ()

    @classmethod
    def parse(cls, text: str | Sequence[str]) -> Predicate:
        """Parse clauses joined by ``and``, ``&`` or commas; ``all`` matches everything."""
        if isinstance(text, str) and text.strip().lower() in ("all", "true"):
            return cls()
        parts = re.split(r"\s+and\s+|\s*&\s*|\s*,\s*", text) if isinstance(text, str) else list(text)
        clauses = []
        for part in parts:
            if not part.strip():
                continue
            m = _CLAUSE.match(part)
            if not m:
                raise ValueError(f"cannot parse predicate clause {part!r}")
            name, op, raw = m.groups()
            if name not in PREDICATE_FIELDS:
                raise ValueError(f"unknown predicate field {name!r}")
            op = "==" if op == "=" else op
            value: float | str = raw if name == "station_id" else float(raw)
            clauses.append(Clause(name, op, value))
        return cls(tuple(clauses))

    def __call__(self, row: StationHourRow) -> bool:
        return all(c(row) for c in self.clauses)

    @property
    def name(self) -> str:
        return "&".join(str(c) for c in self.clauses) or "all"

    @property
    def fields(self) -> list[str]:
        return [c.field for c in self.clauses]


class EmptySelectionError(ValueError):
    """A predicate matched no anomalies."""

    def __init__(self, predicate: Predicate, strata: dict[tuple, int]):
        self.predicate = predicate
        self.strata = strata
        fields = ", ".join(predicate.fields) or "(none)"
        listing = "; ".join(
            f"{'/'.join(str(v) for v in key)}: {n}" for key, n in sorted(strata.items())
        )
        super().__init__(
            f"predicate {predicate.name!r} matches no anomalies; available strata by {fields}: {listing or 'none'}"
        )


def available_strata(anomalies: Sequence[AnomalyRecord], fields: Sequence[str]) -> dict[tuple, int]:
    return dict(Counter(tuple(getattr(a.row, f) for f in fields) for a in anomalies))


def subset_explain(anomalies: Sequence[AnomalyRecord], predicate: Predicate) -> ImportanceVector:
    """Mean Local-DIFFI over the anomalies the predicate selects."""
    chosen = [a for a in anomalies if predicate(a.row)]
    if not chosen:
        raise EmptySelectionError(predicate, available_strata(anomalies, predicate.fields))
    return aggregate_local([a.importance for a in chosen], subject=predicate.name)
