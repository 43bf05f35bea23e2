import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from terminal_embed.errors import CertificationError
from terminal_embed.sketch import (
    Sketch, certified_sketch, default_k, identity_sketch, inner_product_defect,
    pair_distortion, sample_sketch, sampled_hull_distortion,
)


def test_sample_sketch_shape_and_determinism():
    P = sample_sketch(7, 3, seed=11)
    assert P.matrix.shape == (3, 7)
    assert (P.k, P.d) == (3, 7)
    assert np.array_equal(P.matrix, sample_sketch(7, 3, seed=11).matrix)
    with pytest.raises(ValueError):
        sample_sketch(0, 3, 1)


def test_sample_sketch_column_norm_mean():
    vals = [np.sum(sample_sketch(4, 8, s).matrix[:, 0] ** 2) for s in range(10_000)]
    assert 0.95 <= np.mean(vals) <= 1.05


def test_pair_distortion_identity_and_scaled():
    X = np.random.default_rng(0).standard_normal((20, 5))
    assert pair_distortion(identity_sketch(5), X) == pytest.approx(0.0, abs=1e-12)
    assert pair_distortion(Sketch(2 * np.eye(5)), X) == pytest.approx(1.0, abs=1e-12)


def test_pair_distortion_matches_explicit_pairs_with_near_duplicates():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((60, 6)) * 100 + 1e3
    X[7] = X[8] + 1e-7
    P = sample_sketch(6, 4, 3)
    i, j = np.triu_indices(len(X), 1)
    diff = X[i] - X[j]
    direct = np.max(np.abs(np.linalg.norm(diff @ P.matrix.T, axis=1) / np.linalg.norm(diff, axis=1) - 1))
    assert pair_distortion(P, X) == pytest.approx(direct, rel=1e-9)


def test_pair_distortion_needs_two_points():
    with pytest.raises(ValueError):
        pair_distortion(identity_sketch(2), np.zeros((1, 2)))


def test_hull_identity_is_zero():
    X = np.random.default_rng(2).standard_normal((10, 4))
    rep = sampled_hull_distortion(identity_sketch(4), X, 500, seed=0)
    assert rep.max_sampled_hull_violation == pytest.approx(0.0, abs=1e-12)


def test_hull_single_pair_reduces_to_pair_distortion():
    X = np.array([[0.0, 0.0], [3.0, 4.0]])
    P = sample_sketch(2, 3, 4)
    rep = sampled_hull_distortion(P, X, 200, seed=1)
    assert rep.max_pair_violation == pytest.approx(pair_distortion(P, X), abs=1e-12)


def test_hull_includes_pure_differences_and_origin():
    X = np.random.default_rng(3).standard_normal((8, 5))
    P = sample_sketch(5, 3, 9)
    rep = sampled_hull_distortion(P, X, 10, seed=2)
    assert rep.samples == 10 + 28 + 1
    assert rep.max_sampled_hull_violation >= pair_distortion(P, X) - 1e-12
    assert rep.violations[-1] == 0.0


def test_inner_product_defect_trivial_cases():
    P = sample_sketch(4, 6, 0)
    assert inner_product_defect(identity_sketch(4), [1, 2, 3, 4], [0, 1, 0, 1]) == pytest.approx(0.0)
    assert inner_product_defect(P, np.zeros(4), [1, 2, 3, 4]) == 0.0


def test_inner_product_defect_on_hull_points_within_six_eps():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((20, 16))
    P = certified_sketch(X, 400, 0.25, seed=1, retries=20)
    eps = pair_distortion(P, X)
    i, j = np.triu_indices(20, 1)
    units = (X[i] - X[j]) / np.linalg.norm(X[i] - X[j], axis=1)[:, None]
    for _ in range(200):
        a, b = (rng.dirichlet(np.ones(8)) * rng.choice([-1, 1], 8) @ units[rng.integers(0, len(units), 8)]
                for _ in range(2))
        assert inner_product_defect(P, a, b) <= 6 * eps


def test_default_k():
    assert default_k(256, 0.25) == math.ceil(8 * 16 * math.log(256))
    assert default_k(1, 0.5) >= 1


def test_certified_sketch_success_and_failure():
    X = np.random.default_rng(6).standard_normal((30, 10))
    P = certified_sketch(X, 200, 0.5, seed=2)
    assert pair_distortion(P, X) <= 0.5
    with pytest.raises(CertificationError):
        certified_sketch(X, 1, 1e-6, seed=2, retries=3)


@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
def test_polarization_identity(seed_p, seed_v):
    P = sample_sketch(5, 4, seed_p)
    x, y = np.random.default_rng(seed_v).standard_normal((2, 5))

    def sq_defect(z):
        return np.sum(P.apply(z) ** 2) - np.sum(z ** 2)

    polar = abs(sq_defect(x + y) - sq_defect(x - y)) / 4
    assert inner_product_defect(P, x, y) == pytest.approx(polar, abs=1e-9)


@given(st.integers(0, 10 ** 6), st.floats(-50, 50), st.floats(0.01, 100))
def test_pair_distortion_translation_and_scale_invariant(seed, shift, scale):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((12, 4))
    P = sample_sketch(4, 3, seed)
    base = pair_distortion(P, X)
    assert pair_distortion(P, X + shift) == pytest.approx(base, rel=1e-6, abs=1e-9)
    assert pair_distortion(P, X * scale) == pytest.approx(base, rel=1e-6, abs=1e-9)


@given(st.integers(0, 10 ** 6))
def test_pair_distortion_bounded_by_hull_max(seed):
    X = np.random.default_rng(seed).standard_normal((9, 4))
    P = sample_sketch(4, 2, seed)
    rep = sampled_hull_distortion(P, X, 20, seed)
    assert pair_distortion(P, X) <= rep.max_sampled_hull_violation + 1e-12
    assert np.all(rep.violations >= 0)
