from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from tbfa.distributions import (
    CovFactorization,
    child_seed,
    digamma,
    mahalanobis,
    matrix_normal_log_density,
    mt_log_density,
    rng_stream,
    sample_gamma,
    sample_matrix_normal,
    sample_mt,
    trigamma,
)
from tbfa.errors import CorruptParameterError, DimensionError, DomainError

EULER_GAMMA = 0.5772156649015329


def test_digamma_known_values():
    assert digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-15)
    assert digamma(0.5) == pytest.approx(-EULER_GAMMA - 2 * math.log(2), abs=1e-14)
    assert digamma(np.array([1.0, 2.0]))[1] == pytest.approx(1 - EULER_GAMMA, abs=1e-15)


def test_trigamma_known_values():
    assert trigamma(1.0) == pytest.approx(math.pi ** 2 / 6, rel=1e-14)
    assert trigamma(0.5) == pytest.approx(math.pi ** 2 / 2, rel=1e-14)


@given(st.floats(1e-3, 1e6))
def test_digamma_matches_scipy(x):
    assert digamma(x) == pytest.approx(special.digamma(x), rel=1e-12, abs=1e-12)
    assert trigamma(x) == pytest.approx(special.polygamma(1, x), rel=1e-12)


@given(st.floats(1e-2, 1e4))
def test_recurrences(x):
    assert digamma(x + 1) - digamma(x) == pytest.approx(1 / x, rel=1e-10, abs=1e-12)
    assert trigamma(x) - trigamma(x + 1) == pytest.approx(1 / x ** 2, rel=1e-9)


def test_array_and_scalar_paths_agree():
    xs = np.array([0.1, 0.7, 3.0, 6.0, 50.0])
    np.testing.assert_allclose(digamma(xs), [digamma(float(v)) for v in xs], rtol=1e-15)
    np.testing.assert_allclose(trigamma(xs), [trigamma(float(v)) for v in xs], rtol=1e-15)


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
def test_special_function_domain(bad):
    with pytest.raises(DomainError):
        digamma(bad)
    with pytest.raises(DomainError):
        trigamma(np.array([1.0, bad]))


def test_cov_factorization_basics():
    a = np.array([[4.0, 1.0], [1.0, 3.0]])
    f = CovFactorization.from_matrix(a)
    assert f.log_det == pytest.approx(math.log(11.0))
    np.testing.assert_allclose(f.inverse() @ a, np.eye(2), atol=1e-14)
    with pytest.raises(ValueError):
        f.matrix[0, 0] = 1.0


def test_cov_factorization_rejects_bad_input():
    with pytest.raises(CorruptParameterError):
        CovFactorization.from_matrix([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(CorruptParameterError):
        CovFactorization.from_matrix([[np.nan]])
    with pytest.raises(DimensionError):
        CovFactorization.from_matrix(np.ones((2, 3)))


def test_univariate_special_cases():
    one = CovFactorization.from_matrix([[1.0]])
    x = np.zeros((1, 1))
    # nu = 1 gives the standard Cauchy density, 1/pi at the origin
    assert mt_log_density(x, x, one, one, 1.0) == pytest.approx(-math.log(math.pi), abs=1e-15)
    assert matrix_normal_log_density(x, x, one, one) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_mt_density_against_vectorized_t():
    from scipy.stats import multivariate_t

    rng = rng_stream(1)
    sc = CovFactorization.from_matrix([[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 1.5]])
    sr = CovFactorization.from_matrix([[1.0, -0.4], [-0.4, 0.8]])
    w = rng.standard_normal((3, 2))
    x = rng.standard_normal((5, 3, 2))
    ours = mt_log_density(x, w, sc, sr, 4.5)
    ref = multivariate_t(loc=w.ravel(order="F"), shape=np.kron(sr.matrix, sc.matrix),
                         df=4.5).logpdf(x.transpose(0, 2, 1).reshape(5, -1))
    np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-11)


def test_t_density_tends_to_normal():
    sc = CovFactorization.from_matrix(np.eye(2))
    sr = CovFactorization.from_matrix([[2.0]])
    x = np.array([[0.3], [-1.2]])
    w = np.zeros((2, 1))
    assert mt_log_density(x, w, sc, sr, 1e7) == pytest.approx(
        matrix_normal_log_density(x, w, sc, sr), abs=1e-6)


def test_mahalanobis_matches_dense():
    rng = rng_stream(2)
    a = rng.standard_normal((4, 4))
    b = rng.standard_normal((3, 3))
    sc = CovFactorization.from_matrix(a @ a.T + np.eye(4))
    sr = CovFactorization.from_matrix(b @ b.T + np.eye(3))
    x = rng.standard_normal((6, 4, 3))
    e = x.transpose(0, 2, 1).reshape(6, -1)
    big = np.linalg.inv(np.kron(sr.matrix, sc.matrix))
    np.testing.assert_allclose(mahalanobis(x, np.zeros((4, 3)), sc, sr),
                               np.einsum("ni,ij,nj->n", e, big, e), rtol=1e-12)
    assert isinstance(mahalanobis(x[0], np.zeros((4, 3)), sc, sr), float)


def test_shape_mismatch():
    sc = CovFactorization.from_matrix(np.eye(2))
    with pytest.raises(DimensionError):
        mahalanobis(np.zeros((3, 2)), np.zeros((3, 2)), sc, sc)


def test_gamma_sampler_moments():
    draws = sample_gamma(3.0, 2.0, rng_stream(3), size=200_000)
    assert draws.mean() == pytest.approx(1.5, rel=0.01)
    assert draws.var() == pytest.approx(0.75, rel=0.02)
    with pytest.raises(DomainError):
        sample_gamma(0.0, 1.0, rng_stream(3))


def test_samplers_have_kronecker_covariance():
    sc = CovFactorization.from_matrix([[1.0, 0.5], [0.5, 2.0]])
    sr = CovFactorization.from_matrix([[1.5, -0.3], [-0.3, 1.0]])
    big = np.kron(sr.matrix, sc.matrix)
    n = 200_000
    x = sample_matrix_normal(np.zeros((2, 2)), sc, sr, rng_stream(4), size=n)
    v = x.transpose(0, 2, 1).reshape(n, -1)
    np.testing.assert_allclose(v.T @ v / n, big, atol=0.03)
    nu = 6.0
    x = sample_mt(np.ones((2, 2)), sc, sr, nu, rng_stream(5), size=n)
    v = x.transpose(0, 2, 1).reshape(n, -1) - 1.0
    np.testing.assert_allclose(v.T @ v / n, big * nu / (nu - 2), atol=0.06)
    assert sample_mt(np.ones((2, 2)), sc, sr, nu, rng_stream(5)).shape == (2, 2)


def test_streams_are_reproducible_and_distinct():
    a = rng_stream(7, 1).standard_normal(3)
    b = rng_stream(7, 1).standard_normal(3)
    c = rng_stream(7, 2).standard_normal(3)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    assert child_seed(7, 1) == child_seed(7, 1) != child_seed(7, 2)
    assert 0 <= child_seed(7, 1) < 2 ** 63


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.floats(0.5, 50), st.integers(0, 10_000))
def test_density_is_invariant_to_joint_rescaling(d_c, d_r, nu, seed):
    """Multiplying Sc by a and Sr by 1/a leaves the density unchanged."""
    rng = rng_stream(seed)
    a = rng.standard_normal((d_c, d_c))
    b = rng.standard_normal((d_r, d_r))
    sc, sr = a @ a.T + np.eye(d_c), b @ b.T + np.eye(d_r)
    x = rng.standard_normal((d_c, d_r))
    w = np.zeros((d_c, d_r))
    base = mt_log_density(x, w, CovFactorization.from_matrix(sc), CovFactorization.from_matrix(sr), nu)
    moved = mt_log_density(x, w, CovFactorization.from_matrix(3.0 * sc),
                           CovFactorization.from_matrix(sr / 3.0), nu)
    assert moved == pytest.approx(base, rel=1e-10, abs=1e-10)
