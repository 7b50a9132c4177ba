import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mobility_ad.iforest import (
    ForestModel,
    IsolationTree,
    anomaly_scores,
    average_path_length,
    fit,
    path_length,
    path_lengths,
    score,
    scores_from_path_lengths,
    threshold_by_contamination,
    tree_path_lengths,
)


# -- normalizer ------------------------------------------------------------


def test_average_path_length_special_cases():
    assert average_path_length(0) == 0
    assert average_path_length(1) == 0
    assert average_path_length(2) == 1


def test_average_path_length_256_high_precision():
    getcontext().prec = 40
    n = Decimal(256)
    gamma = Decimal("0.5772156649")
    exact = 2 * ((n - 1).ln() + gamma) - 2 * (n - 1) / n
    assert abs(float(exact) - 10.2445) <= 0.0005
    assert average_path_length(256) == pytest.approx(float(exact), abs=1e-12)


# -- hand-built trees -------------------------------------------------------


def model_of(*trees, psi=4, features=1):
    cap = max(t.max_depth for t in trees)
    return ForestModel(tuple(trees), psi, cap, features, 0, tuple(f"x{i}" for i in range(features)))


def tree_from(feature, threshold, left, right, size):
    return IsolationTree.from_dict(
        {"feature": feature, "threshold": threshold, "left": left, "right": right, "size": size}
    )


def test_single_leaf_tree_path_length_is_c_psi():
    leaf = tree_from([-1], [None], [-1], [-1], [8])
    m = model_of(leaf, psi=8)
    assert path_length(m, [123.0]) == average_path_length(8)
    assert scores_from_path_lengths(path_lengths(m, np.array([[0.0]])), 8)[0] == pytest.approx(0.5, abs=1e-12)


def test_depth_one_tree_with_singleton_leaves():
    t = tree_from([0, -1, -1], [0.5, None, None], [1, -1, -1], [2, -1, -1], [2, 1, 1])
    m = model_of(t, psi=2)
    for x in (-10.0, 0.0, 0.5, 0.9, 99.0):
        assert path_length(m, [x]) == 1.0


def test_three_node_tree_hand_traced():
    # root splits x0 at 2.0; the left leaf kept 3 samples, the right leaf 1
    t = tree_from([0, -1, -1], [2.0, None, None], [1, -1, -1], [2, -1, -1], [4, 3, 1])
    m = model_of(t, psi=4, features=2)
    c3 = 2 * (math.log(2) + 0.5772156649) - 2 * 2 / 3
    probes = {(-5.0, 0.0): 1 + c3, (1.999, 7.0): 1 + c3, (2.0, 0.0): 1.0, (40.0, -1.0): 1.0}
    for row, expected in probes.items():
        assert path_length(m, row) == pytest.approx(expected, abs=1e-15)


def test_dimension_mismatch_is_an_error():
    m = fit(np.random.default_rng(0).normal(size=(20, 3)), n_trees=2, subsample_size=8)
    with pytest.raises(ValueError):
        path_lengths(m, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        anomaly_scores(m, np.zeros((2, 2)))


# -- fitting ----------------------------------------------------------------


def test_identical_rows_give_single_leaf_trees():
    data = np.tile([[1.0, 2.0, 3.0]], (40, 1))
    m = fit(data, n_trees=5, subsample_size=16)
    for t in m.trees:
        assert t.n_nodes == 1 and t.size[0] == 16
    assert np.allclose(anomaly_scores(m, data), 0.5, atol=1e-12)


def test_fit_errors():
    with pytest.raises(ValueError):
        fit(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        fit(np.zeros((3, 0)))
    with pytest.raises(ValueError):
        fit(np.zeros((3, 2)), seed=-1)


def test_fit_is_deterministic_and_round_trips(tmp_path):
    data = np.random.default_rng(1).normal(size=(300, 4))
    a = fit(data, n_trees=10, subsample_size=64, seed=7)
    b = fit(data, n_trees=10, subsample_size=64, seed=7)
    assert a == b
    assert a.to_json() == b.to_json()
    a.save(tmp_path / "m.json")
    c = ForestModel.load(tmp_path / "m.json")
    assert c == a
    np.testing.assert_array_equal(anomaly_scores(c, data), anomaly_scores(a, data))
    assert fit(data, n_trees=10, subsample_size=64, seed=8) != a


def test_structural_invariants():
    data = np.random.default_rng(2).normal(size=(500, 3))
    m = fit(data, n_trees=20, subsample_size=100, seed=3)
    assert m.n_trees == 20 and m.depth_cap == 7 and m.subsample_size == 100
    for t in m.trees:
        internal = ~t.is_leaf
        assert t.max_depth <= m.depth_cap
        assert np.all(t.size[t.is_leaf] >= 1)
        assert np.all(t.size[internal] == t.size[t.left[internal]] + t.size[t.right[internal]])
    small = fit(data[:10], subsample_size=256)
    assert small.subsample_size == 10


def replay_tree(values, seed, depth_cap):
    """Scripted replay of the pinned draw order for a 1-column dataset."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    order = rng.permutation(len(values))
    nodes = []

    def node(sample, depth):
        me = {"size": len(sample), "pos": len(nodes)}
        nodes.append(me)
        if depth >= depth_cap or len(sample) <= 1 or min(sample) == max(sample):
            return me
        rng.integers(1)  # the only candidate column
        lo, hi = min(sample), max(sample)
        split = rng.uniform(lo, hi)
        while split <= lo:
            split = rng.uniform(lo, hi)
        me["split"] = split
        me["left"] = node([v for v in sample if v < split], depth + 1)["pos"]
        me["right"] = node([v for v in sample if v >= split], depth + 1)["pos"]
        return me

    node([values[i] for i in order], 0)
    return nodes


@pytest.mark.parametrize("seed", [0, 1, 42])
def test_eight_point_tree_matches_rng_replay(seed):
    values = [0.3, 1.7, 2.2, 2.9, 4.0, 5.5, 9.1, 15.0]
    m = fit(np.array(values).reshape(-1, 1), n_trees=1, subsample_size=8, seed=seed)
    t = m.trees[0]
    expected = replay_tree(values, seed, depth_cap=3)
    # both are preorder listings
    assert t.n_nodes == len(expected)
    for i, want in enumerate(expected):
        assert t.size[i] == want["size"]
        if "split" in want:
            assert t.feature[i] == 0 and t.threshold[i] == want["split"]
            assert (t.left[i], t.right[i]) == (want["left"], want["right"])
        else:
            assert t.feature[i] == -1


def naive_c(n):
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * (math.log(n - 1) + 0.5772156649) - 2.0 * (n - 1) / n


def naive_length(doc, row, node=0, depth=0):
    f = doc["feature"][node]
    if f == -1:
        return depth + naive_c(doc["size"][node])
    nxt = doc["left"][node] if row[f] < doc["threshold"][node] else doc["right"][node]
    return naive_length(doc, row, nxt, depth + 1)


def test_fast_path_matches_naive_traversal_small_forest():
    rng = np.random.default_rng(5)
    data = rng.normal(size=(200, 3))
    m = fit(data, n_trees=4, subsample_size=16, seed=11)
    fast = tree_path_lengths(m, data)
    for t, tree in enumerate(m.trees):
        doc = tree.to_dict()
        naive = [naive_length(doc, row) for row in data.tolist()]
        assert fast[:, t].tolist() == naive


# -- scores -----------------------------------------------------------------


def test_score_limits():
    assert scores_from_path_lengths(average_path_length(256), 256) == pytest.approx(0.5, abs=1e-12)
    assert scores_from_path_lengths(1e-9, 256) == pytest.approx(1.0, abs=1e-9)


def test_scored_rows():
    data = np.random.default_rng(3).normal(size=(50, 2))
    m = fit(data, n_trees=10, subsample_size=32)
    rows = score(m, data)
    assert [r.row_index for r in rows] == list(range(50))
    assert all(0 < r.anomaly_score < 1 and not r.is_anomaly for r in rows)


def test_gaussian_blob_with_far_outliers():
    rng = np.random.default_rng(0)
    inliers = rng.normal(size=(1900, 2))
    outliers = rng.uniform(6, 10, size=(100, 2)) * rng.choice([-1, 1], size=(100, 2))
    data = np.vstack([inliers, outliers])
    s = anomaly_scores(fit(data, seed=0), data)
    assert s[1900:].mean() > s[:1900].mean()


matrices = arrays(
    np.float64,
    st.tuples(st.integers(1, 40), st.integers(1, 4)),
    elements=st.floats(-1e3, 1e3, allow_nan=False, width=32),
)


@settings(max_examples=40, deadline=None)
@given(matrices, st.integers(0, 2**32 - 1))
def test_scores_strictly_inside_unit_interval(data, seed):
    m = fit(data, n_trees=5, subsample_size=16, seed=seed)
    s = anomaly_scores(m, data)
    assert np.all((s > 0) & (s < 1))


@settings(max_examples=30, deadline=None)
@given(matrices, st.integers(0, 1000))
def test_duplicated_rows_score_identically(data, seed):
    doubled = np.vstack([data, data[:1]])
    s = anomaly_scores(fit(doubled, n_trees=5, subsample_size=16, seed=seed), doubled)
    assert s[0] == s[-1]


# -- contamination ---------------------------------------------------------


def test_contamination_two_scores():
    thr, flags = threshold_by_contamination([0.1, 0.9], 0.5)
    assert flags.tolist() == [False, True]


def test_contamination_all_ties_flags_nothing():
    _, flags = threshold_by_contamination([0.5] * 20, 0.1)
    assert not flags.any()


def test_contamination_thousand_distinct():
    scores = np.random.default_rng(0).permutation(1000) / 1000 + 0.0001
    thr, flags = threshold_by_contamination(scores, 0.05)
    assert flags.sum() == 50
    assert scores[flags].min() > thr >= scores[~flags].max()


def test_contamination_bounds():
    for bad in (0, 1, -0.1, 1.5):
        with pytest.raises(ValueError):
            threshold_by_contamination([0.1, 0.2], bad)
    with pytest.raises(ValueError):
        threshold_by_contamination([], 0.1)


@given(st.lists(st.integers(0, 30), min_size=1, max_size=200), st.floats(0.001, 0.999))
def test_flagged_fraction_bounds(values, c):
    scores = np.array(values, dtype=float) / 30
    _, flags = threshold_by_contamination(scores, c)
    n = len(scores)
    ties = n - len(np.unique(scores))
    frac = flags.sum() / n
    assert frac <= c + 1e-12
    assert frac >= c - (ties + 1) / n - 1e-12
