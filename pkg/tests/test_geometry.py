import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from terminal_embed.geometry import (
    Partition, PointSet, UnionFind, brute_nearest, connected_components, deduplicate,
    leq, lifted_direction, lifted_query, pairwise_distances, r_med_exact,
)
from terminal_embed.partition_tree import refines

coords = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def point_sets(max_n=12, max_d=4):
    return st.integers(1, max_d).flatmap(
        lambda d: arrays(np.float64, st.tuples(st.integers(2, max_n), st.just(d)), elements=coords))


def test_pointset_validation():
    assert PointSet([[1.0, 2.0]]).d == 2
    assert PointSet([1.0, 2.0, 3.0]).n == 3
    with pytest.raises(ValueError):
        PointSet([[np.nan, 1.0]])
    with pytest.raises(ValueError):
        PointSet(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointSet([[1.0, np.inf]])


def test_pointset_is_read_only():
    P = PointSet([[1.0, 2.0]])
    with pytest.raises(ValueError):
        P.points[0, 0] = 5.0


def test_partition_canonical_labels():
    assert Partition([5, 5, 2, 7]) == Partition([0, 0, 1, 2])
    assert Partition.from_blocks([[2], [0, 1]], 3).blocks == [[0, 1], [2]]
    assert Partition([3, 1, 3]).num_blocks == 2


def test_union_find_merges():
    uf = UnionFind(4)
    uf.union(0, 1)
    uf.union(2, 3)
    assert uf.find(1) == uf.find(0)
    assert uf.find(2) != uf.find(0)
    root = uf.union(1, 3)
    assert uf.size[root] == 4


def test_cc_line_example():
    assert connected_components([0.0, 1.0, 3.0], 1.0).blocks == [[0, 1], [2]]


def test_cc_zero_radius_distinct_points_are_singletons():
    X = np.arange(5.0)
    assert connected_components(X, 0.0).num_blocks == 5


def test_cc_single_point():
    assert connected_components([[2.0, 3.0]], 7.0).blocks == [[0]]


def test_cc_coincident_points_share_block():
    assert connected_components([[1.0], [1.0], [4.0]], 0.0).blocks == [[0, 1], [2]]


def test_cc_negative_radius_rejected():
    with pytest.raises(ValueError):
        connected_components([0.0, 1.0], -1.0)


def test_r_med_examples():
    assert r_med_exact([0.0, 1.0, 2.0, 10.0]) == 1.0
    assert r_med_exact([0.0, 5.0]) == 5.0
    assert r_med_exact(np.ones((4, 3))) == 0.0


def test_r_med_single_point_errors():
    with pytest.raises(ValueError, match="r_med undefined for a single point"):
        r_med_exact([[1.0, 2.0]])


def test_lifted_direction_forced_arithmetic():
    v = lifted_direction([3.0], [0.0], np.array([[1.0]]))
    assert np.allclose(v, [1 / math.sqrt(2), 1 / math.sqrt(2)])


def test_lifted_direction_zero_errors():
    with pytest.raises(ValueError, match="zero direction"):
        lifted_direction([1.0, 2.0], [1.0, 2.0], np.eye(2))


def test_lifted_query_cases():
    P = np.eye(2)
    with pytest.raises(ValueError, match="zero vector"):
        lifted_query([1.0, 1.0], [1.0, 1.0], P @ [1.0, 1.0], P)
    y = np.array([1.0, 0.0])
    q = np.array([4.0, 4.0])
    out = lifted_query(q, y, P @ y, P)
    assert np.allclose(out, np.concatenate([(q - y) / 5.0, [0.0, 0.0]]))


def test_brute_nearest_examples():
    assert brute_nearest([[0.0], [10.0]], [4.0]) == (0, 4.0)
    assert brute_nearest([[0.0], [2.0]], [1.0])[0] == 0
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert brute_nearest(X, X[1]) == (1, 0.0)


def test_deduplicate_remap():
    X = np.array([[1.0], [2.0], [1.0], [3.0], [2.0]])
    U, keep, remap = deduplicate(X)
    assert U.ravel().tolist() == [1.0, 2.0, 3.0]
    assert keep.tolist() == [0, 1, 3]
    assert remap.tolist() == [0, 1, 0, 2, 1]
    assert np.array_equal(U[remap], X)


def test_leq_tolerance():
    assert leq(1.0 + 1e-13, 1.0)
    assert not leq(1.0 + 1e-9, 1.0)


@given(point_sets(), st.floats(0, 50), st.floats(0, 50))
def test_cc_monotone_in_radius(X, r1, r2):
    lo, hi = sorted((r1, r2))
    assert refines(connected_components(X, hi), connected_components(X, lo))


@given(point_sets(), st.integers(0, 10 ** 6))
def test_lifted_direction_antisymmetric_and_unit(X, seed):
    P = np.random.default_rng(seed).standard_normal((3, X.shape[1]))
    y, z = X[0], X[1]
    if np.array_equal(y, z):
        return
    a = lifted_direction(y, z, P)
    assert abs(np.linalg.norm(a) - 1) <= 1e-12
    assert np.allclose(a, -lifted_direction(z, y, P), atol=1e-12)


@given(st.integers(0, 10 ** 6), st.floats(0, 1))
def test_sign_pair_identity(seed, C):
    rng = np.random.default_rng(seed)
    u, w = rng.standard_normal((2, 6))
    u /= np.linalg.norm(u)
    w /= np.linalg.norm(w)
    lhs = abs(u @ w) <= C
    rhs = np.sum((u - w) ** 2) >= 2 - 2 * C - 1e-12 and np.sum((u + w) ** 2) >= 2 - 2 * C - 1e-12
    assert lhs == rhs or abs(abs(u @ w) - C) < 1e-9


@given(point_sets(), arrays(np.float64, 4, elements=coords))
def test_brute_nearest_matches_naive_loop(X, q):
    q = q[:X.shape[1]]
    best, best_i = math.inf, -1
    for i, x in enumerate(X):
        dist = math.sqrt(sum((a - b) ** 2 for a, b in zip(x, q)))
        if dist < best:
            best, best_i = dist, i
    i, dist = brute_nearest(X, q)
    assert math.isclose(dist, best, rel_tol=1e-12, abs_tol=1e-12)
    assert i == best_i or math.isclose(float(np.linalg.norm(X[i] - q)), best, rel_tol=1e-12)


@given(point_sets())
def test_pairwise_distances_match_direct(X):
    D = pairwise_distances(X)
    direct = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2)
    assert np.allclose(D, direct, atol=1e-7 * (1 + np.abs(X).max()))


@given(point_sets(max_n=10))
def test_r_med_is_smallest_sufficient_radius(X):
    r = r_med_exact(X)
    need = max(2, math.ceil(len(X) / 2))
    assert max(connected_components(X, r).block_sizes()) >= need
    smaller = np.unique(pairwise_distances(X))
    smaller = smaller[smaller < r * (1 - 1e-9)]
    if len(smaller):
        assert max(connected_components(X, smaller[-1]).block_sizes()) < need
