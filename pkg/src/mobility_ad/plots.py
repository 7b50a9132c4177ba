"""Static SVG renderings of a report bundle.

Output is byte-stable for a given matplotlib version: the SVG id salt is
fixed, the date metadata is dropped and text is drawn as paths.
"""

from __future__ import annotations

import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .diffi import ImportanceVector  # noqa: E402
from .reports import ReportBundle, Table  # noqa: E402

_RC = {
    "svg.hashsalt": "mobility-ad",
    "svg.fonttype": "path",
    "font.family": "DejaVu Sans",
    "figure.dpi": 100,
}
EMPTY_NOTE = "no anomalies detected"


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _empty(ax, note: str = EMPTY_NOTE) -> None:
    ax.text(0.5, 0.5, note, ha="center", va="center", transform=ax.transAxes, color="0.4")


def _grid(table: Table, row_key: str, value_key: str) -> tuple[list, list, np.ndarray]:
    ys = sorted(set(table.column(row_key)))
    xs = sorted(set(table.column("date")))
    grid = np.full((len(ys), len(xs)), np.nan)
    yi = {v: i for i, v in enumerate(ys)}
    xi = {v: i for i, v in enumerate(xs)}
    for rec in table.records():
        grid[yi[rec[row_key]], xi[rec["date"]]] = rec[value_key]
    return ys, xs, grid


def _heatmap(table: Table, row_key: str, value_key: str, title: str, label: str, path: Path, empty: bool) -> Path:
    fig, ax = plt.subplots(figsize=(10, 4))
    if len(table) == 0:
        _empty(ax, "no data")
    else:
        ys, xs, grid = _grid(table, row_key, value_key)
        im = ax.imshow(np.ma.masked_invalid(grid), aspect="auto", cmap="Reds", interpolation="nearest")
        ax.set_xticks(range(len(xs)), [d.day for d in xs], fontsize=7)
        step = max(1, len(ys) // 30)
        ax.set_yticks(range(0, len(ys), step), [str(y) for y in ys[::step]], fontsize=7)
        ax.set_xlabel("day of month")
        ax.set_ylabel(row_key)
        fig.colorbar(im, ax=ax, label=label)
        if empty:
            _empty(ax)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def _station_bars(bundle: ReportBundle, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(8, 4))
    table = bundle.station_counts.table
    ids = table.column("station_id")[: bundle.station_counts.k]
    counts = table.column("anomaly_count")[: bundle.station_counts.k]
    if ids:
        ax.bar(range(len(ids)), counts, color="tab:red")
        ax.set_xticks(range(len(ids)), ids, rotation=60, ha="right", fontsize=7)
    else:
        _empty(ax)
    ax.set_ylabel("anomalies")
    ax.set_title(f"Top {bundle.station_counts.k} stations by anomaly count")
    fig.tight_layout()
    return _save(fig, path)


def _temporal(table: Table, key: str, labels: list[str], title: str, path: Path, empty: bool) -> Path:
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(len(table))
    mean = np.asarray(table.column("mean_trips"), dtype=float)
    half = np.asarray(table.column("half_width_95"), dtype=float)
    ax.plot(x, mean, color="tab:blue", label="mean trips")
    ax.fill_between(x, mean - half, mean + half, color="tab:blue", alpha=0.25, linewidth=0)
    ax.set_ylabel("trips")
    ax.set_xticks(x, labels, fontsize=7)
    ax.set_xlabel(key)
    twin = ax.twinx()
    twin.plot(x, table.column("anomaly_count"), color="tab:red", marker="o", markersize=3, label="anomalies")
    twin.set_ylabel("anomalies")
    if empty:
        _empty(ax)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def _importance_bars(vec: ImportanceVector, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    order = vec.ranking[::-1]
    ax.barh(range(len(order)), vec.scores[order], color="tab:green")
    ax.set_yticks(range(len(order)), [vec.columns[i] for i in order], fontsize=8)
    ax.set_xlabel(f"{vec.kind.value} importance")
    ax.set_title(vec.subject or vec.kind.value)
    fig.tight_layout()
    return _save(fig, path)


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_") or "all"


def render_plots(bundle: ReportBundle, out_dir: str | Path) -> list[Path]:
    """Render every figure of the bundle as SVG into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    empty = bundle.n_anomalies == 0
    t = bundle.temporal
    paths = []
    with plt.rc_context(_RC):
        paths.append(
            _heatmap(
                bundle.neighborhood_daily, "neighborhood_id", "pct_anomalous",
                "Anomalous stations by neighborhood and day", "% of active stations",
                out / "neighborhood_daily.svg", empty,
            )
        )
        paths.append(
            _heatmap(
                bundle.station_daily, "station_id", "anomaly_count",
                "Anomalies by station and day", "flagged station-hours",
                out / "station_daily.svg", empty,
            )
        )
        paths.append(_station_bars(bundle, out / "station_counts.svg"))
        paths.append(
            _temporal(t.hourly, "hour", [str(h) for h in t.hourly.column("hour")],
                      "Trips and anomalies by hour of day", out / "temporal_hourly.svg", empty)
        )
        paths.append(
            _temporal(t.weekday, "weekday", t.weekday.column("weekday_name"),
                      "Trips and anomalies by weekday", out / "temporal_weekday.svg", empty)
        )
        for name, vec in sorted(bundle.subset_rankings.items()):
            paths.append(_importance_bars(vec, out / f"ranking_{_slug(name)}.svg"))
    return paths
