from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbfa.distributions import CovFactorization, matrix_normal_log_density, mt_log_density, rng_stream
from tbfa.errors import CorruptParameterError, DimensionError, EmptyDataError
from tbfa.model import (
    IdentificationWarning,
    LowRankCov,
    MatrixDataset,
    TbfaParams,
    derive,
    factor_scores,
    free_param_count,
    identify,
    log_likelihood,
    max_factors,
    tau_weights,
    varimax,
    varimax_criterion,
)


def random_params(rng, d_c=4, d_r=3, q_c=2, q_r=1, nu=5.0):
    return TbfaParams(
        W=rng.standard_normal((d_c, d_r)),
        C=rng.standard_normal((d_c, q_c)),
        Psi_c=rng.uniform(0.3, 1.5, d_c),
        R=rng.standard_normal((d_r, q_r)),
        Psi_r=rng.uniform(0.3, 1.5, d_r),
        nu=nu,
    )


def dense_covs(p):
    return p.C @ p.C.T + np.diag(p.Psi_c), p.R @ p.R.T + np.diag(p.Psi_r)


# ---------------------------------------------------------------------------
# parameter containers


def test_params_are_immutable_and_validated():
    p = random_params(rng_stream(1))
    with pytest.raises(ValueError):
        p.C[0, 0] = 2.0
    with pytest.raises(CorruptParameterError):
        p.replace(Psi_c=-p.Psi_c)
    with pytest.raises(CorruptParameterError):
        p.replace(nu=0.0)
    with pytest.raises(DimensionError):
        p.replace(Psi_r=np.ones(7))
    g = p.replace(gaussian=True)
    assert math.isinf(g.nu)


def test_dataset_validation():
    assert MatrixDataset(np.zeros((2, 3))).n == 1
    with pytest.raises(EmptyDataError):
        MatrixDataset(np.zeros((0, 2, 2)))
    with pytest.raises(CorruptParameterError):
        MatrixDataset(np.full((1, 2, 2), np.nan))
    with pytest.raises(DimensionError):
        MatrixDataset(np.zeros((2, 2, 2)), labels=("a",))


# ---------------------------------------------------------------------------
# derived quantities


def test_derive_zero_loadings():
    p = TbfaParams(W=np.zeros((3, 2)), C=np.zeros((3, 1)), Psi_c=np.ones(3),
                   R=np.zeros((2, 1)), Psi_r=np.ones(2))
    st_ = derive(p)
    np.testing.assert_array_equal(st_.sigma_c.matrix, np.eye(3))
    np.testing.assert_array_equal(st_.m_c, np.eye(1))


def test_derive_rank_one_m():
    c = np.array([[1.0], [2.0], [-0.5]])
    psi = 0.7
    p = TbfaParams(W=np.zeros((3, 1)), C=c, Psi_c=np.full(3, psi), R=np.ones((1, 0)),
                   Psi_r=np.ones(1))
    assert derive(p).m_c[0, 0] == pytest.approx(1 + float(np.sum(c * c)) / psi)


def test_derive_reconstructs_sigma():
    p = random_params(rng_stream(2))
    st_ = derive(p)
    sc, sr = dense_covs(p)
    np.testing.assert_allclose(st_.sigma_c.matrix, sc, atol=1e-12)
    np.testing.assert_allclose(st_.sigma_r.matrix, sr, atol=1e-12)
    assert np.linalg.eigvalsh(st_.m_c).min() >= 1 - 1e-12


@pytest.mark.parametrize("d", [3, 80])
def test_low_rank_cov_matches_dense(d):
    rng = rng_stream(d)
    load = rng.standard_normal((d, 2))
    psi = rng.uniform(0.5, 2, d)
    lr = LowRankCov(load, psi)
    dense = load @ load.T + np.diag(psi)
    b = rng.standard_normal((d, 3))
    np.testing.assert_allclose(lr.solve(b), np.linalg.solve(dense, b), rtol=1e-10, atol=1e-12)
    assert lr.log_det == pytest.approx(np.linalg.slogdet(dense)[1], rel=1e-12)


# ---------------------------------------------------------------------------
# likelihood


def test_loglik_cauchy_center():
    p = TbfaParams(W=np.zeros((1, 1)), C=np.zeros((1, 0)), Psi_c=np.ones(1),
                   R=np.zeros((1, 0)), Psi_r=np.ones(1), nu=1.0)
    assert log_likelihood(p, np.zeros((1, 1, 1))) == pytest.approx(-math.log(math.pi), abs=1e-15)


def test_loglik_equals_density_sum():
    rng = rng_stream(3)
    p = random_params(rng)
    x = rng.standard_normal((7, 4, 3)) * 2
    sc, sr = dense_covs(p)
    ref = mt_log_density(x, p.W, CovFactorization.from_matrix(sc),
                         CovFactorization.from_matrix(sr), p.nu).sum()
    assert log_likelihood(p, x) == pytest.approx(ref, abs=1e-9)


def test_loglik_gaussian_limit():
    rng = rng_stream(4)
    p = random_params(rng, nu=1e6)
    x = rng.standard_normal((5, 4, 3))
    sc, sr = dense_covs(p)
    ref = matrix_normal_log_density(x, p.W, CovFactorization.from_matrix(sc),
                                    CovFactorization.from_matrix(sr)).sum()
    assert log_likelihood(p, x) == pytest.approx(ref, abs=1e-3)
    assert log_likelihood(p.replace(gaussian=True), x) == pytest.approx(ref, abs=1e-10)


def test_loglik_shape_mismatch():
    p = random_params(rng_stream(5))
    with pytest.raises(DimensionError):
        log_likelihood(p, np.zeros((2, 3, 4)))


# ---------------------------------------------------------------------------
# counting


def test_free_param_count():
    assert free_param_count(10, 10, 3, 3) == 175
    assert free_param_count(2, 2, 1, 1) == 13
    assert free_param_count(10, 10, 3, 3, gaussian=True) == 174


def test_max_factors_examples():
    assert max_factors(10) == 6
    assert max_factors(1) == 0
    assert max_factors(8) == 4
    with pytest.raises(DimensionError):
        max_factors(0)


@given(st.integers(1, 5000))
def test_max_factors_matches_formula(d):
    # float oracle; exact integer logic agrees except at perfect squares where float may err
    bound = d + (1 - math.sqrt(1 + 8 * d)) / 2
    assert max_factors(d) == max(0, math.floor(bound + 1e-9))


# ---------------------------------------------------------------------------
# identification


def _random_orthogonal(rng, q):
    m, _ = np.linalg.qr(rng.standard_normal((q, q)))
    return m


def test_identify_structure_and_likelihood():
    rng = rng_stream(6)
    p = random_params(rng, d_c=5, d_r=4, q_c=2, q_r=2)
    x = rng.standard_normal((6, 5, 4))
    ident = identify(p)
    assert ident.Psi_c[0] == pytest.approx(1.0)
    assert ident.C[0, 1] == 0 and ident.R[0, 1] == 0
    assert ident.C[0, 0] >= 0 and ident.C[1, 1] >= 0
    assert log_likelihood(ident, x) == pytest.approx(log_likelihood(p, x), abs=1e-8)
    np.testing.assert_allclose(np.kron(*dense_covs(ident)[::-1]), np.kron(*dense_covs(p)[::-1]),
                               atol=1e-10)


def test_identify_is_idempotent_and_invariant():
    rng = rng_stream(7)
    p = random_params(rng, d_c=5, d_r=4, q_c=2, q_r=2)
    ident = identify(p)
    again = identify(ident)
    np.testing.assert_allclose(again.C, ident.C, atol=1e-12)
    np.testing.assert_allclose(again.R, ident.R, atol=1e-12)
    rotated = p.replace(C=p.C @ _random_orthogonal(rng, 2), R=p.R @ _random_orthogonal(rng, 2))
    np.testing.assert_allclose(identify(rotated).C, ident.C, atol=1e-10)
    a = 3.7
    scaled = p.replace(C=math.sqrt(a) * p.C, Psi_c=a * p.Psi_c, R=p.R / math.sqrt(a), Psi_r=p.Psi_r / a)
    si = identify(scaled)
    for name in ("C", "Psi_c", "R", "Psi_r"):
        np.testing.assert_allclose(getattr(si, name), getattr(ident, name), atol=1e-10)


def test_identify_reversed_convention_zero_pattern():
    p = random_params(rng_stream(8), d_c=5, d_r=5, q_c=2, q_r=2)
    ident = identify(p, "reversed")
    assert ident.C[0, 0] == 0 and ident.R[0, 0] == 0
    np.testing.assert_allclose(ident.C[:, ::-1], identify(p).C, atol=1e-12)


def test_identify_rank_deficient_warns():
    p = random_params(rng_stream(9), d_c=4, q_c=2)
    p = p.replace(C=np.column_stack([p.C[:, 0], 2 * p.C[:, 0]]))
    with pytest.warns(IdentificationWarning):
        identify(p)


# ---------------------------------------------------------------------------
# scores and weights


def test_factor_scores_trivial_cases():
    p = random_params(rng_stream(10))
    np.testing.assert_allclose(factor_scores(p, p.W), 0.0, atol=1e-14)
    z = factor_scores(p.replace(C=np.zeros_like(p.C)), p.W + 1.0)
    np.testing.assert_allclose(z, 0.0, atol=1e-14)


def test_factor_scores_match_vectorized_formula():
    rng = rng_stream(11)
    p = random_params(rng, d_c=4, d_r=4, q_c=2, q_r=2)
    x = rng.standard_normal((4, 4))
    # vec(Z) has identity covariance and Cov(vec X, vec Z) = R (x) C, so the
    # conditional mean is (R (x) C)' (Sr (x) Sc)^{-1} vec(X - W)
    sc, sr = dense_covs(p)
    a = np.kron(p.R, p.C)
    vec_z = a.T @ np.linalg.solve(np.kron(sr, sc), (x - p.W).ravel(order="F"))
    np.testing.assert_allclose(factor_scores(p, x), vec_z.reshape(2, 2, order="F"), atol=1e-10)


def test_factor_scores_transpose_symmetry():
    rng = rng_stream(12)
    p = random_params(rng, d_c=4, d_r=3, q_c=2, q_r=1)
    x = rng.standard_normal((4, 3))
    t = TbfaParams(W=p.W.T, C=p.R, Psi_c=p.Psi_r, R=p.C, Psi_r=p.Psi_c, nu=p.nu)
    np.testing.assert_allclose(factor_scores(t, x.T), factor_scores(p, x).T, atol=1e-12)


def test_factor_scores_batch():
    rng = rng_stream(13)
    p = random_params(rng)
    x = rng.standard_normal((5, 4, 3))
    z = factor_scores(p, x)
    assert z.shape == (5, 2, 1)
    np.testing.assert_allclose(z[3], factor_scores(p, x[3]), atol=1e-14)


def test_tau_weights_values():
    p = TbfaParams(W=np.zeros((1, 1)), C=np.zeros((1, 0)), Psi_c=np.ones(1),
                   R=np.zeros((1, 0)), Psi_r=np.ones(1), nu=4.0)
    tau = tau_weights(p, np.array([[[0.0]], [[1.0]], [[3.0]]]))
    assert tau[0] == pytest.approx(5.0 / 4.0)
    assert tau[1] == pytest.approx(1.0)
    assert tau[0] > tau[1] > tau[2] > 0
    np.testing.assert_array_equal(tau_weights(p.replace(gaussian=True), np.ones((3, 1, 1))), 1.0)


def test_tau_flags_inflated_observation():
    from tbfa.simbench import draw

    rng = rng_stream(14)
    p = random_params(rng)
    x = draw(p, 500, rng)
    x[0] = p.W + 100 * (x[0] - p.W)
    tau = tau_weights(p, x)
    assert tau[0] < np.percentile(tau[1:], 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_tau_bounds(seed):
    rng = rng_stream(seed)
    p = random_params(rng, nu=float(rng.uniform(0.5, 30)))
    x = rng.standard_normal((20, 4, 3)) * rng.uniform(0.1, 10)
    tau = tau_weights(p, x)
    assert np.all(tau > 0)
    assert np.all(tau <= (p.nu + 12) / p.nu + 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_identify_preserves_loglik(seed):
    rng = rng_stream(seed)
    p = random_params(rng, d_c=5, d_r=4, q_c=2, q_r=2)
    x = rng.standard_normal((5, 5, 4))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IdentificationWarning)
        ident = identify(p)
    assert log_likelihood(ident, x) == pytest.approx(log_likelihood(p, x), abs=1e-8)


# ---------------------------------------------------------------------------
# varimax


def test_varimax_single_factor():
    a = np.array([[1.0], [-2.0], [0.5]])
    np.testing.assert_allclose(np.abs(varimax(a)), np.abs(a))


def test_varimax_beats_rotation_grid():
    rng = rng_stream(15)
    a = rng.standard_normal((8, 2))
    best = varimax_criterion(varimax(a))
    for theta in np.linspace(0, 2 * np.pi, 360, endpoint=False):
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        assert best >= varimax_criterion(a @ rot) - 1e-10


def test_varimax_fixed_point():
    rng = rng_stream(16)
    a = varimax(rng.standard_normal((8, 3)))
    b = varimax(a)
    assert varimax_criterion(b) == pytest.approx(varimax_criterion(a), rel=1e-8)
