"""Tests for TV, KL and Wasserstein-1 dissimilarities."""
import math

import numpy as np
import pytest

from measure_mdp.core.dissimilarity import (
    DissimilarityKind,
    DissimilarityName,
    kullback_leibler,
    line_metric,
    total_variation,
    validate_ground_metric,
    wasserstein1,
)
from measure_mdp.core.errors import DomainError, InputError
from measure_mdp.core.sampling import make_rng, sample_simplex


def test_total_variation_properties():
    rng = make_rng(10)
    for n in (2, 3, 5):
        a = sample_simplex(n, 1000, rng)
        b = sample_simplex(n, 1000, rng)
        c = sample_simplex(n, 1000, rng)
        for x, y, z in zip(a, b, c):
            assert total_variation(x, y) == pytest.approx(total_variation(y, x), abs=1e-15)
            assert total_variation(x, z) <= total_variation(x, y) + total_variation(y, z) + 1e-12
            assert 0.0 <= total_variation(x, y) <= 1.0
            assert total_variation(x, x) == 0.0


def test_kl_of_dirac_against_uniform_is_ln2():
    assert kullback_leibler([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2.0), abs=1e-12)


def test_kl_support_mismatch_is_a_domain_error():
    with pytest.raises(DomainError):
        kullback_leibler([0.5, 0.5], [1.0, 0.0])


def test_kl_is_zero_on_equal_measures():
    rho = np.array([0.2, 0.3, 0.5])
    assert kullback_leibler(rho, rho) == 0.0


def test_w1_matches_cdf_formula_on_line_metric():
    rng = make_rng(4)
    for n in (2, 3, 6):
        metric = line_metric(n)
        for x, y in zip(sample_simplex(n, 25, rng), sample_simplex(n, 25, rng)):
            expected = float(np.abs(np.cumsum(x - y)[:-1]).sum())
            assert wasserstein1(x, y, metric) == pytest.approx(expected, abs=1e-9)


def test_w1_between_diracs_is_ground_distance():
    metric = line_metric(4)
    assert wasserstein1(np.eye(4)[0], np.eye(4)[3], metric) == pytest.approx(3.0, abs=1e-9)


def test_ground_metric_validation():
    validate_ground_metric(line_metric(3))
    with pytest.raises(DomainError):
        validate_ground_metric(np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(DomainError):
        validate_ground_metric(np.array([[1.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(DomainError):
        validate_ground_metric(np.array([[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]]))


def test_kind_construction():
    assert DissimilarityKind.from_name("tv", 3).kind is DissimilarityName.TOTAL_VARIATION
    w1 = DissimilarityKind.from_name("w1", 3)
    assert np.array_equal(w1.ground_metric, line_metric(3))
    with pytest.raises(InputError):
        DissimilarityKind(DissimilarityName.WASSERSTEIN1)
    with pytest.raises(InputError):
        DissimilarityKind.from_name("hellinger", 3)


def test_kind_is_callable():
    kl = DissimilarityKind.from_name("kl", 2)
    assert kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2.0))
    assert DissimilarityKind.from_name("w1", 2)([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0)


def test_w1_is_a_metric_bounded_by_the_ground_metric():
    rng = make_rng(11)
    metric = np.array([[0.0, 1.0, 2.5], [1.0, 0.0, 2.0], [2.5, 2.0, 0.0]])
    for x, y, z in zip(*(sample_simplex(3, 200, rng) for _ in range(3))):
        xy = wasserstein1(x, y, metric)
        assert xy == pytest.approx(wasserstein1(y, x, metric), abs=1e-8)
        assert wasserstein1(x, z, metric) <= xy + wasserstein1(y, z, metric) + 1e-8
        assert 0.0 <= xy <= metric.max() + 1e-12


def test_kl_and_w1_vanish_on_equal_measures():
    rng = make_rng(12)
    metric = line_metric(4)
    for rho in sample_simplex(4, 1000, rng):
        assert kullback_leibler(rho, rho) == 0.0
        assert wasserstein1(rho, rho, metric) <= 1e-9
