"""Depth-based feature importance (DIFFI) for a fitted isolation forest.

Local scores explain one row: every split feature met on the row's path in a
tree earns ``1/d - 1/d_max`` where ``d`` is the edge depth of the leaf the row
lands in and ``d_max`` the forest depth cap. A feature's score is the mean of
its earnings over all the times it was met, so shallow isolations weigh most.

Global scores compare predicted outliers against inliers. Each class is routed
through every tree; a node's induced imbalance is measured on that class's
counts, and each visit to a split adds ``imbalance / h(x)`` with ``h(x)`` the
adjusted path length. The global score of a feature is the outlier mean
divided by the inlier mean.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .iforest import (
    ForestModel,
    IsolationTree,
    _as_array,
    _check_dims,
    anomaly_scores,
    leaf_indices,
    path_nodes,
)

logger = logging.getLogger(__name__)


class ImportanceKind(str, Enum):
    GLOBAL = "Global"
    LOCAL = "Local"


@dataclass(frozen=True, eq=False)
class ImportanceVector:
    scores: np.ndarray
    columns: tuple[str, ...]
    kind: ImportanceKind
    subject: str = ""

    @property
    def ranking(self) -> list[int]:
        """Column indices by descending score; ties keep column order."""
        return [int(i) for i in np.argsort(-self.scores, kind="stable")]

    def ranked_names(self) -> list[str]:
        return [self.columns[i] for i in self.ranking]

    def top(self, k: int) -> list[str]:
        return self.ranked_names()[:k]

    def score_of(self, column: str) -> float:
        return float(self.scores[self.columns.index(column)])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImportanceVector):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.subject == other.subject
            and self.columns == other.columns
            and np.array_equal(self.scores, other.scores)
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "subject": self.subject,
            "columns": list(self.columns),
            "scores": [float(s) for s in self.scores],
            "ranking": self.ranking,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ImportanceVector:
        vec = cls(
            np.asarray(doc["scores"], dtype=np.float64),
            tuple(doc["columns"]),
            ImportanceKind(doc["kind"]),
            doc.get("subject", ""),
        )
        if "ranking" in doc and list(doc["ranking"]) != vec.ranking:
            raise ValueError("stored ranking disagrees with scores")
        return vec

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _local_accumulate(model: ForestModel, data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, k = data.shape
    importance = np.zeros((n, k))
    counter = np.zeros((n, k))
    d_max = model.depth_cap
    for tree in model.trees:
        paths = path_nodes(tree, data)
        if paths.shape[1] == 0:
            continue
        on_path = paths >= 0
        depth = on_path.sum(axis=1)
        gain = np.zeros(n)
        hit = depth > 0
        gain[hit] = 1.0 / depth[hit] - 1.0 / d_max
        rows, levels = np.nonzero(on_path)
        feats = tree.feature[paths[rows, levels]]
        np.add.at(importance, (rows, feats), gain[rows])
        np.add.at(counter, (rows, feats), 1.0)
    return importance, counter


def local_diffi_batch(model: ForestModel, matrix) -> np.ndarray:
    """Local scores for every row, shape ``(n_rows, n_features)``."""
    data, _ = _as_array(matrix)
    _check_dims(model, data)
    if model.depth_cap == 0:
        logger.warning("forest has depth cap 0; local importances are all zero")
        return np.zeros(data.shape)
    importance, counter = _local_accumulate(model, data)
    out = np.zeros_like(importance)
    np.divide(importance, counter, out=out, where=counter > 0)
    return out


def local_diffi(model: ForestModel, row: Sequence[float], subject: str = "") -> ImportanceVector:
    """Local-DIFFI explanation for a single row."""
    data = np.asarray(row, dtype=np.float64).reshape(1, -1)
    scores = local_diffi_batch(model, data)[0]
    return ImportanceVector(scores, model.column_names, ImportanceKind.LOCAL, subject)


def induced_imbalance(n_left: int, n_right: int) -> float:
    """Imbalance of a split rescaled onto [0.5, 1]; 0 when one side is empty."""
    total = n_left + n_right
    if total < 1:
        raise ValueError("a split needs at least one sample")
    if n_left == 0 or n_right == 0:
        return 0.0
    lam_min = math.ceil(total / 2) / total
    lam_max = (total - 1) / total
    if lam_max == lam_min:
        return 1.0
    raw = max(n_left, n_right) / total
    return 0.5 + 0.5 * (raw - lam_min) / (lam_max - lam_min)


def _imbalance_array(n_left: np.ndarray, n_right: np.ndarray) -> np.ndarray:
    total = n_left + n_right
    out = np.zeros(len(total))
    ok = (n_left > 0) & (n_right > 0)
    t = total[ok].astype(np.float64)
    lam_min = np.ceil(t / 2) / t
    lam_max = (t - 1) / t
    raw = np.maximum(n_left[ok], n_right[ok]) / t
    span = lam_max - lam_min
    val = np.ones(len(t))
    wide = span > 0
    val[wide] = 0.5 + 0.5 * (raw[wide] - lam_min[wide]) / span[wide]
    out[ok] = val
    return out


def _tree_counts(tree: IsolationTree, paths: np.ndarray, leaf: np.ndarray) -> np.ndarray:
    counts = np.zeros(tree.n_nodes, dtype=np.int64)
    np.add.at(counts, paths[paths >= 0], 1)
    np.add.at(counts, leaf, 1)
    return counts


def node_class_counts(model: ForestModel, matrix) -> list[np.ndarray]:
    """Per tree, how many rows of ``matrix`` pass through each node."""
    data, _ = _as_array(matrix)
    return [_tree_counts(t, path_nodes(t, data), leaf_indices(t, data)) for t in model.trees]


def _class_accumulate(model: ForestModel, data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = model.feature_count
    importance = np.zeros(k)
    counter = np.zeros(k)
    if len(data) == 0:
        return importance, counter
    for tree in model.trees:
        paths = path_nodes(tree, data)
        if paths.shape[1] == 0:
            continue
        leaf = leaf_indices(tree, data)
        counts = _tree_counts(tree, paths, leaf)
        internal = np.flatnonzero(~tree.is_leaf)
        lam = np.zeros(tree.n_nodes)
        lam[internal] = _imbalance_array(counts[tree.left[internal]], counts[tree.right[internal]])
        h = tree.depth[leaf] + tree.leaf_adjustment()[leaf]
        rows, levels = np.nonzero(paths >= 0)
        nodes = paths[rows, levels]
        np.add.at(importance, tree.feature[nodes], lam[nodes] / h[rows])
        np.add.at(counter, tree.feature[nodes], 1.0)
    return importance, counter


class NoOutliersError(ValueError):
    """Global importance needs at least one predicted outlier."""


def global_diffi(model: ForestModel, matrix, threshold: float, scores: np.ndarray | None = None) -> ImportanceVector:
    """Global DIFFI over a dataset split into outliers/inliers by ``threshold``.

    Rows scoring strictly above the threshold are the outliers.
    """
    data, _ = _as_array(matrix)
    _check_dims(model, data)
    if scores is None:
        scores = anomaly_scores(model, data)
    outlier = np.asarray(scores) > threshold
    if not outlier.any():
        raise NoOutliersError("no rows score above the threshold; raise the contamination")
    imp_o, cnt_o = _class_accumulate(model, data[outlier])
    imp_i, cnt_i = _class_accumulate(model, data[~outlier])

    mean_o = np.zeros(model.feature_count)
    np.divide(imp_o, cnt_o, out=mean_o, where=cnt_o > 0)
    mean_i = np.zeros(model.feature_count)
    np.divide(imp_i, cnt_i, out=mean_i, where=cnt_i > 0)
    gfi = mean_o.copy()
    ratio = (cnt_o > 0) & (cnt_i > 0) & (mean_i > 0)
    gfi[ratio] = mean_o[ratio] / mean_i[ratio]
    return ImportanceVector(gfi, model.column_names, ImportanceKind.GLOBAL, "global")


def aggregate_local(importances: Sequence[ImportanceVector], subject: str = "") -> ImportanceVector:
    """Per-feature mean of several local explanations."""
    if not importances:
        raise ValueError("nothing to aggregate")
    columns = importances[0].columns
    for vec in importances:
        if vec.kind is not ImportanceKind.LOCAL:
            raise ValueError("only local importances can be aggregated")
        if vec.columns != columns:
            raise ValueError("importance vectors disagree on columns")
    mean = np.mean(np.stack([v.scores for v in importances]), axis=0)
    return ImportanceVector(mean, columns, ImportanceKind.LOCAL, subject)
