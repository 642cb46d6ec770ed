"""Special functions, samplers and log-densities for the Gamma,
matrix-normal and matrix-variate t distributions.

Densities are only exposed on the log scale. Covariances are carried as
:class:`CovFactorization` objects so that determinants and solves reuse a
single Cholesky factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .errors import CorruptParameterError, DimensionError, DomainError

RngStream = np.random.Generator

_PIVOT_FLOOR = 1e-300

# Bernoulli-number coefficients of the asymptotic expansions, valid once x >= 10.
_DIGAMMA_COEF = (
    -1.0 / 12,
    1.0 / 120,
    -1.0 / 252,
    1.0 / 240,
    -1.0 / 132,
    691.0 / 32760,
    -1.0 / 12,
    3617.0 / 8160,
)
_TRIGAMMA_COEF = (
    1.0 / 6,
    -1.0 / 30,
    1.0 / 42,
    -1.0 / 30,
    5.0 / 66,
    -691.0 / 2730,
    7.0 / 6,
    -3617.0 / 510,
)


def rng_stream(seed: int | None = None, *keys: int) -> RngStream:
    """Return a PCG64 generator; ``keys`` derive independent child streams."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))


def child_seed(seed: int, *keys: int) -> int:
    """Deterministic 63-bit seed for the sub-task identified by ``keys``."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _as_positive(x, name: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"{name} requires x > 0")
    return arr, arr.ndim == 0


def _digamma_scalar(x: float) -> float:
    if not x > 0:
        raise DomainError("digamma requires x > 0")
    acc = 0.0
    while x < 10.0:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = 0.0
    for c in reversed(_DIGAMMA_COEF):
        series = (series + c) * inv2
    return acc + math.log(x) - 0.5 / x + series


def _trigamma_scalar(x: float) -> float:
    if not x > 0:
        raise DomainError("trigamma requires x > 0")
    acc = 0.0
    while x < 10.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = 0.0
    for c in reversed(_TRIGAMMA_COEF):
        series = (series + c) * inv2
    return acc + inv + 0.5 * inv2 + series * inv


def digamma(x):
    """Digamma function for positive arguments (scalar or array)."""
    if isinstance(x, (float, int)):
        return _digamma_scalar(float(x))
    arr, scalar = _as_positive(x, "digamma")
    z = np.array(arr, dtype=float, copy=True, ndmin=1)
    acc = np.zeros_like(z)
    small = z < 10.0
    while np.any(small):
        acc[small] -= 1.0 / z[small]
        z[small] += 1.0
        small = z < 10.0
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for c in reversed(_DIGAMMA_COEF):
        series = (series + c) * inv2
    out = acc + np.log(z) - 0.5 / z + series
    return float(out[0]) if scalar else out.reshape(arr.shape)


def trigamma(x):
    """Trigamma function (derivative of digamma) for positive arguments."""
    if isinstance(x, (float, int)):
        return _trigamma_scalar(float(x))
    arr, scalar = _as_positive(x, "trigamma")
    z = np.array(arr, dtype=float, copy=True, ndmin=1)
    acc = np.zeros_like(z)
    small = z < 10.0
    while np.any(small):
        acc[small] += 1.0 / (z[small] * z[small])
        z[small] += 1.0
        small = z < 10.0
    inv = 1.0 / z
    inv2 = inv * inv
    series = np.zeros_like(z)
    for c in reversed(_TRIGAMMA_COEF):
        series = (series + c) * inv2
    out = acc + inv + 0.5 * inv2 + series * inv
    return float(out[0]) if scalar else out.reshape(arr.shape)


@dataclass(frozen=True)
class CovFactorization:
    """SPD matrix with its lower Cholesky factor and log-determinant."""

    matrix: np.ndarray
    lower_factor: np.ndarray
    log_det: float

    @classmethod
    def from_matrix(cls, matrix) -> "CovFactorization":
        a = np.array(matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"covariance must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise CorruptParameterError("covariance contains non-finite entries")
        a = 0.5 * (a + a.T)
        try:
            low = np.linalg.cholesky(a)
        except np.linalg.LinAlgError as exc:
            raise CorruptParameterError(f"covariance is not positive definite: {exc}") from exc
        piv = np.diag(low)
        if np.min(piv) <= _PIVOT_FLOOR:
            k = int(np.argmin(piv))
            raise CorruptParameterError(f"Cholesky pivot {k} is {piv[k]:.3e} (<= 1e-300)")
        a.setflags(write=False)
        low.setflags(write=False)
        return cls(matrix=a, lower_factor=low, log_det=float(2.0 * np.sum(np.log(piv))))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Return ``matrix^{-1} @ b`` via two triangular solves."""
        y = solve_triangular(self.lower_factor, b, lower=True, check_finite=False)
        return solve_triangular(self.lower_factor.T, y, lower=False, check_finite=False)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.dim))


def _check_mean_shape(x: np.ndarray, w: np.ndarray, col_cov: CovFactorization,
                      row_cov: CovFactorization) -> None:
    d_c, d_r = col_cov.dim, row_cov.dim
    if w.shape != (d_c, d_r) or x.shape[-2:] != (d_c, d_r):
        raise DimensionError(
            f"expected {d_c}x{d_r} matrices, got x {x.shape} and w {w.shape}"
        )


def sample_gamma(shape: float, rate: float, rng: RngStream, size=None):
    """Gamma(shape, rate) draws; the mean is ``shape / rate``."""
    if not (shape > 0 and rate > 0):
        raise DomainError("sample_gamma needs shape > 0 and rate > 0")
    return rng.gamma(shape, 1.0 / rate, size=size)


def sample_matrix_normal(mean, col_cov: CovFactorization, row_cov: CovFactorization,
                         rng: RngStream, size: int | None = None) -> np.ndarray:
    """Draw ``mean + L_c E L_r^T`` with standard normal ``E``.

    Returns one matrix, or a stack of ``size`` matrices.
    """
    mean = np.asarray(mean, dtype=float)
    _check_mean_shape(mean, mean, col_cov, row_cov)
    n = 1 if size is None else int(size)
    e = rng.standard_normal((n,) + mean.shape)
    x = mean + np.matmul(np.matmul(col_cov.lower_factor, e), row_cov.lower_factor.T)
    return x[0] if size is None else x


def sample_mt(w, col_cov: CovFactorization, row_cov: CovFactorization, nu: float,
              rng: RngStream, size: int | None = None) -> np.ndarray:
    """Matrix-variate t draw through its Gamma-mixture representation."""
    if not nu > 0:
        raise DomainError("nu must be positive")
    w = np.asarray(w, dtype=float)
    _check_mean_shape(w, w, col_cov, row_cov)
    n = 1 if size is None else int(size)
    tau = sample_gamma(nu / 2.0, nu / 2.0, rng, size=n)
    e = rng.standard_normal((n,) + w.shape)
    z = np.matmul(np.matmul(col_cov.lower_factor, e), row_cov.lower_factor.T)
    x = w + z / np.sqrt(tau)[:, None, None]
    return x[0] if size is None else x


def mahalanobis(x, w, col_cov: CovFactorization, row_cov: CovFactorization):
    """Squared distance ``tr{Sc^-1 (x-w) Sr^-1 (x-w)^T}``.

    ``x`` may be a single matrix or a stack ``(n, d_c, d_r)``.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    _check_mean_shape(x, w, col_cov, row_cov)
    single = x.ndim == 2
    e = (x - w).reshape((-1,) + w.shape)
    n, d_c, d_r = e.shape
    # L_c^{-1} E for every observation at once: stack columns side by side.
    y = solve_triangular(col_cov.lower_factor, e.transpose(1, 0, 2).reshape(d_c, n * d_r),
                         lower=True, check_finite=False)
    y = y.reshape(d_c, n, d_r).transpose(1, 0, 2)
    z = solve_triangular(row_cov.lower_factor, y.transpose(2, 0, 1).reshape(d_r, n * d_c),
                         lower=True, check_finite=False)
    delta = np.einsum("ij,ij->j", z, z).reshape(n, d_c).sum(axis=1)
    return float(delta[0]) if single else delta


def mt_log_density(x, w, col_cov: CovFactorization, row_cov: CovFactorization, nu: float):
    """Log-density of the matrix-variate t distribution.

    Accepts a single matrix or a stack; returns a float or an array.
    """
    if not nu > 0:
        raise DomainError("nu must be positive")
    d_c, d_r = col_cov.dim, row_cov.dim
    dim = d_c * d_r
    delta = mahalanobis(x, w, col_cov, row_cov)
    const = (
        gammaln(0.5 * (nu + dim))
        - gammaln(0.5 * nu)
        - 0.5 * dim * np.log(np.pi * nu)
        - 0.5 * d_r * col_cov.log_det
        - 0.5 * d_c * row_cov.log_det
    )
    return const - 0.5 * (nu + dim) * np.log1p(np.asarray(delta) / nu)


def matrix_normal_log_density(x, w, col_cov: CovFactorization, row_cov: CovFactorization):
    """Log-density of the matrix-normal distribution (the nu -> inf limit)."""
    d_c, d_r = col_cov.dim, row_cov.dim
    dim = d_c * d_r
    delta = mahalanobis(x, w, col_cov, row_cov)
    const = (
        -0.5 * dim * np.log(2.0 * np.pi)
        - 0.5 * d_r * col_cov.log_det
        - 0.5 * d_c * row_cov.log_det
    )
    return const - 0.5 * np.asarray(delta)
