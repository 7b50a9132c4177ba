"""Isolation Forest built from scratch on numpy arrays.

Random-number contract
----------------------
Tree ``t`` of a forest fitted with ``seed`` draws from its own stream,
``numpy.random.Generator(numpy.random.Philox(key=[seed, t]))`` (Philox4x64-10,
a counter-based generator). Draw order inside one tree:

1. ``rng.permutation(n_rows)``; the first ``subsample_size`` indices form the
   tree's sample.
2. Nodes are built depth-first, left child before right. At each node that is
   split: ``rng.integers(len(candidates))`` picks the feature among the columns
   that are non-constant on the node's samples (ascending column order), then
   ``rng.uniform(lo, hi)`` draws the split value; a draw ``<= lo`` is redrawn.

Rows go left when ``value < split_value``; ties go right.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__

EULER_GAMMA = 0.5772156649
FOREST_FORMAT = "mobility-ad/isolation-forest"
FOREST_FORMAT_VERSION = 1


def average_path_length(n: int | float) -> float:
    """Expected path length of an unsuccessful BST search over ``n`` points."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * (math.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n


def _average_path_length_array(sizes: np.ndarray) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    out = np.zeros_like(sizes)
    big = sizes > 2
    n = sizes[big]
    out[big] = 2.0 * (np.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n
    out[sizes == 2] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class IsolationTree:
    """Flat preorder node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray  # int64
    threshold: np.ndarray  # float64, NaN at leaves
    left: np.ndarray  # int64, -1 at leaves
    right: np.ndarray  # int64, -1 at leaves
    size: np.ndarray  # int64, training samples reaching the node
    depth: np.ndarray  # int64, edges from the root

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def leaf_adjustment(self) -> np.ndarray:
        """Per-node c(size); only meaningful at leaves."""
        return _average_path_length_array(self.size)

    def to_dict(self) -> dict:
        thr = [None if math.isnan(v) else float(v) for v in self.threshold]
        return {
            "feature": self.feature.tolist(),
            "threshold": thr,
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "size": self.size.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> IsolationTree:
        feature = np.asarray(doc["feature"], dtype=np.int64)
        left = np.asarray(doc["left"], dtype=np.int64)
        right = np.asarray(doc["right"], dtype=np.int64)
        threshold = np.array([np.nan if v is None else v for v in doc["threshold"]], dtype=np.float64)
        size = np.asarray(doc["size"], dtype=np.int64)
        depth = np.zeros(len(feature), dtype=np.int64)
        for node in range(len(feature)):
            if feature[node] >= 0:
                depth[left[node]] = depth[node] + 1
                depth[right[node]] = depth[node] + 1
        return cls(feature, threshold, left, right, size, depth)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IsolationTree):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, name), getattr(other, name), equal_nan=(name == "threshold"))
            for name in ("feature", "threshold", "left", "right", "size", "depth")
        )


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, tree_index], dtype=np.uint64)))


def build_tree(data: np.ndarray, rng: np.random.Generator, depth_cap: int) -> IsolationTree:
    """Grow one isolation tree on ``data`` (already subsampled)."""
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    size: list[int] = []
    depth: list[int] = []

    def grow(idx: np.ndarray, level: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(math.nan)
        left.append(-1)
        right.append(-1)
        size.append(len(idx))
        depth.append(level)
        if level >= depth_cap or len(idx) <= 1:
            return node
        block = data[idx]
        lo_all = block.min(axis=0)
        hi_all = block.max(axis=0)
        candidates = np.flatnonzero(hi_all > lo_all)
        if len(candidates) == 0:
            return node
        col = int(candidates[rng.integers(len(candidates))])
        lo, hi = float(lo_all[col]), float(hi_all[col])
        value = float(rng.uniform(lo, hi))
        while value <= lo:
            value = float(rng.uniform(lo, hi))
        goes_left = block[:, col] < value
        feature[node] = col
        threshold[node] = value
        left[node] = grow(idx[goes_left], level + 1)
        right[node] = grow(idx[~goes_left], level + 1)
        return node

    grow(np.arange(len(data)), 0)
    return IsolationTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(size, dtype=np.int64),
        np.asarray(depth, dtype=np.int64),
    )


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple[IsolationTree, ...]
    subsample_size: int
    depth_cap: int
    feature_count: int
    seed: int
    column_names: tuple[str, ...]

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def normalizer(self) -> float:
        return average_path_length(self.subsample_size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ForestModel):
            return NotImplemented
        return (
            self.subsample_size == other.subsample_size
            and self.depth_cap == other.depth_cap
            and self.feature_count == other.feature_count
            and self.seed == other.seed
            and self.column_names == other.column_names
            and self.trees == other.trees
        )

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FOREST_FORMAT,
            "version": FOREST_FORMAT_VERSION,
            "generator": f"mobility_ad {__version__}",
            "n_trees": self.n_trees,
            "subsample_size": self.subsample_size,
            "depth_cap": self.depth_cap,
            "feature_count": self.feature_count,
            "seed": self.seed,
            "column_names": list(self.column_names),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ForestModel:
        if doc.get("format") != FOREST_FORMAT:
            raise ValueError("not an isolation forest document")
        if doc.get("version") != FOREST_FORMAT_VERSION:
            raise ValueError(f"unsupported forest format version {doc.get('version')}")
        trees = tuple(IsolationTree.from_dict(t) for t in doc["trees"])
        if len(trees) != doc["n_trees"]:
            raise ValueError("tree count does not match n_trees")
        return cls(
            trees=trees,
            subsample_size=int(doc["subsample_size"]),
            depth_cap=int(doc["depth_cap"]),
            feature_count=int(doc["feature_count"]),
            seed=int(doc["seed"]),
            column_names=tuple(doc["column_names"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> ForestModel:
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> ForestModel:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _as_array(matrix) -> tuple[np.ndarray, tuple[str, ...]]:
    values = getattr(matrix, "values", matrix)
    names = tuple(getattr(matrix, "column_names", ()))
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if not names:
        names = tuple(f"x{i}" for i in range(values.shape[1]))
    return values, names


def fit(matrix, n_trees: int = 100, subsample_size: int = 256, seed: int = 0) -> ForestModel:
    """Fit an isolation forest.

    ``matrix`` is a :class:`~mobility_ad.features.FeatureMatrix` or any 2-D
    array. ``subsample_size`` is clipped to the row count and the depth cap is
    ``ceil(log2(subsample_size))``.
    """
    data, names = _as_array(matrix)
    n_rows, n_cols = data.shape
    if n_rows == 0:
        raise ValueError("cannot fit on zero rows")
    if n_cols == 0:
        raise ValueError("cannot fit on zero columns")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if subsample_size < 1:
        raise ValueError("subsample_size must be >= 1")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    psi = min(subsample_size, n_rows)
    depth_cap = math.ceil(math.log2(psi)) if psi > 1 else 0
    trees = []
    for t in range(n_trees):
        rng = tree_rng(seed, t)
        sample = rng.permutation(n_rows)[:psi]
        trees.append(build_tree(data[sample], rng, depth_cap))
    return ForestModel(tuple(trees), psi, depth_cap, n_cols, seed, names)


def leaf_indices(tree: IsolationTree, data: np.ndarray) -> np.ndarray:
    """Leaf reached by every row of ``data``."""
    node = np.zeros(len(data), dtype=np.int64)
    rows = np.arange(len(data))
    for _ in range(tree.max_depth):
        feat = tree.feature[node]
        active = feat >= 0
        if not active.any():
            break
        go_left = data[rows[active], feat[active]] < tree.threshold[node[active]]
        node[active] = np.where(go_left, tree.left[node[active]], tree.right[node[active]])
    return node


def path_nodes(tree: IsolationTree, data: np.ndarray) -> np.ndarray:
    """Internal nodes visited by each row, one column per depth; -1 padding."""
    width = tree.max_depth
    out = np.full((len(data), width), -1, dtype=np.int64)
    node = np.zeros(len(data), dtype=np.int64)
    rows = np.arange(len(data))
    for level in range(width):
        feat = tree.feature[node]
        active = feat >= 0
        if not active.any():
            break
        out[active, level] = node[active]
        go_left = data[rows[active], feat[active]] < tree.threshold[node[active]]
        node[active] = np.where(go_left, tree.left[node[active]], tree.right[node[active]])
    return out


def _check_dims(model: ForestModel, data: np.ndarray) -> None:
    if data.shape[1] != model.feature_count:
        raise ValueError(f"expected {model.feature_count} features, got {data.shape[1]}")


def tree_path_lengths(model: ForestModel, matrix) -> np.ndarray:
    """``(n_rows, n_trees)`` adjusted path lengths (edges + c(leaf size))."""
    data, _ = _as_array(matrix)
    _check_dims(model, data)
    out = np.empty((len(data), model.n_trees))
    for t, tree in enumerate(model.trees):
        leaf = leaf_indices(tree, data)
        out[:, t] = tree.depth[leaf] + tree.leaf_adjustment()[leaf]
    return out


def path_lengths(model: ForestModel, matrix) -> np.ndarray:
    """Mean adjusted path length over the forest for each row."""
    return tree_path_lengths(model, matrix).mean(axis=1)


def path_length(model: ForestModel, row: Sequence[float]) -> float:
    data = np.asarray(row, dtype=np.float64).reshape(1, -1)
    return float(path_lengths(model, data)[0])


def scores_from_path_lengths(expected: np.ndarray | float, subsample_size: int) -> np.ndarray:
    norm = average_path_length(subsample_size)
    if norm == 0:
        # single-sample forests cannot isolate anything
        return np.full(np.shape(expected), 0.5)
    return np.power(2.0, -np.asarray(expected, dtype=np.float64) / norm)


def anomaly_scores(model: ForestModel, matrix) -> np.ndarray:
    """``2 ** (-E[h(x)] / c(psi))`` for every row; larger is more anomalous."""
    return scores_from_path_lengths(path_lengths(model, matrix), model.subsample_size)


@dataclass(frozen=True)
class ScoredRow:
    row_index: int
    expected_path_length: float
    anomaly_score: float
    is_anomaly: bool = False


def score(model: ForestModel, matrix) -> list[ScoredRow]:
    lengths = path_lengths(model, matrix)
    scores = scores_from_path_lengths(lengths, model.subsample_size)
    return [ScoredRow(i, float(h), float(s)) for i, (h, s) in enumerate(zip(lengths, scores))]


def threshold_by_contamination(
    scores: Sequence[float] | np.ndarray, contamination: float
) -> tuple[float, np.ndarray]:
    """Threshold at the ``1 - contamination`` empirical quantile.

    With ``m = floor(contamination * n)`` the threshold is the ``(n - m)``-th
    smallest score, so at most ``m`` rows lie strictly above it. Returns the
    threshold and a boolean mask of flagged rows.
    """
    if not 0.0 < contamination < 1.0:
        raise ValueError("contamination must lie strictly between 0 and 1")
    values = np.asarray(scores, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot threshold an empty score list")
    n = values.size
    m = math.floor(round(contamination * n, 9))
    ordered = np.sort(values)
    threshold = float(ordered[n - m - 1])
    return threshold, values > threshold
