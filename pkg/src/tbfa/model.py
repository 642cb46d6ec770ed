"""Parameter set of the matrix-variate t bilinear factor model and the
quantities derived from it: covariances, log-likelihood, identification,
factor scores and outlier weights.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln

from .distributions import CovFactorization
from .errors import CorruptParameterError, DimensionError, EmptyDataError

ETA = 0.005
NU_MIN = 0.5
NU_MAX = 1e6
_DENSE_LIMIT = 64


class IdentificationWarning(UserWarning):
    """Loading matrix is rank deficient; identification is not unique."""


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TbfaParams:
    """Mean ``W``, loadings ``C``/``R``, uniquenesses ``Psi_c``/``Psi_r`` and ``nu``.

    With ``gaussian=True`` the model is the matrix-normal one (``nu`` is
    infinite and every observation gets weight one).
    """

    W: np.ndarray
    C: np.ndarray
    Psi_c: np.ndarray
    R: np.ndarray
    Psi_r: np.ndarray
    nu: float = 10.0
    gaussian: bool = False

    def __post_init__(self):
        W = _frozen(self.W, 2, "W")
        d_c, d_r = W.shape
        C = _frozen(np.reshape(self.C, (d_c, -1)) if np.size(self.C) else np.zeros((d_c, 0)), 2, "C")
        R = _frozen(np.reshape(self.R, (d_r, -1)) if np.size(self.R) else np.zeros((d_r, 0)), 2, "R")
        Psi_c = _frozen(self.Psi_c, 1, "Psi_c")
        Psi_r = _frozen(self.Psi_r, 1, "Psi_r")
        if Psi_c.shape != (d_c,) or Psi_r.shape != (d_r,):
            raise DimensionError("uniqueness vectors must match the mean's dimensions")
        for name, a in (("W", W), ("C", C), ("R", R), ("Psi_c", Psi_c), ("Psi_r", Psi_r)):
            if not np.all(np.isfinite(a)):
                raise CorruptParameterError(f"{name} has non-finite entries")
        if np.any(Psi_c <= 0) or np.any(Psi_r <= 0):
            raise CorruptParameterError("uniquenesses must be positive")
        nu = math.inf if self.gaussian else float(self.nu)
        if not nu > 0 or math.isnan(nu):
            raise CorruptParameterError("nu must be positive")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Psi_c", Psi_c)
        object.__setattr__(self, "Psi_r", Psi_r)
        object.__setattr__(self, "nu", nu)

    @property
    def d_c(self) -> int:
        return self.W.shape[0]

    @property
    def d_r(self) -> int:
        return self.W.shape[1]

    @property
    def q_c(self) -> int:
        return self.C.shape[1]

    @property
    def q_r(self) -> int:
        return self.R.shape[1]

    def replace(self, **changes) -> "TbfaParams":
        fields = dict(W=self.W, C=self.C, Psi_c=self.Psi_c, R=self.R,
                      Psi_r=self.Psi_r, nu=self.nu, gaussian=self.gaussian)
        fields.update(changes)
        return TbfaParams(**fields)


@dataclass(frozen=True)
class MatrixDataset:
    """``n`` observations of size ``d_c x d_r``, stored as an ``(n, d_c, d_r)`` array."""

    observations: np.ndarray
    labels: tuple | None = None

    def __post_init__(self):
        x = np.array(self.observations, dtype=float)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3:
            raise DimensionError(f"observations must be (n, d_c, d_r), got {x.shape}")
        if x.shape[0] == 0:
            raise EmptyDataError("dataset has no observations")
        if not np.all(np.isfinite(x)):
            raise CorruptParameterError("observations contain non-finite entries")
        x.setflags(write=False)
        object.__setattr__(self, "observations", x)
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != x.shape[0]:
                raise DimensionError("one label per observation is required")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def d_c(self) -> int:
        return self.observations.shape[1]

    @property
    def d_r(self) -> int:
        return self.observations.shape[2]


def as_dataset(data) -> MatrixDataset:
    return data if isinstance(data, MatrixDataset) else MatrixDataset(data)


class LowRankCov:
    """``L L' + diag(psi)`` handled through the Woodbury identity.

    Solves and determinants cost O(d q^2) instead of O(d^3).
    """

    def __init__(self, loading: np.ndarray, psi: np.ndarray):
        self.loading = loading
        self.psi = psi
        self.psi_inv = 1.0 / psi
        self.scaled = loading * self.psi_inv[:, None]  # Psi^{-1} L
        q = loading.shape[1]
        self.m = loading.T @ self.scaled + np.eye(q)
        try:
            self._m_cho = cho_factor(self.m, lower=True) if q else None
        except np.linalg.LinAlgError as exc:
            raise CorruptParameterError(f"M is not positive definite: {exc}") from exc
        logdet_m = 2.0 * np.sum(np.log(np.diag(self._m_cho[0]))) if q else 0.0
        self.log_det = float(np.sum(np.log(psi)) + logdet_m)
        # small matrices: one dense inverse beats repeated Woodbury solves
        self._dense_inv = self.inverse() if loading.shape[0] <= _DENSE_LIMIT else None

    @property
    def dim(self) -> int:
        return self.psi.shape[0]

    def m_solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve(self._m_cho, b) if self._m_cho is not None else b

    def solve(self, b: np.ndarray) -> np.ndarray:
        """``Sigma^{-1} b`` for ``b`` of shape ``(d, k)``."""
        if self._dense_inv is not None:
            return self._dense_inv @ b
        out = self.psi_inv[:, None] * b
        if self._m_cho is None:
            return out
        return out - self.scaled @ self.m_solve(self.scaled.T @ b)

    def dense(self) -> np.ndarray:
        return self.loading @ self.loading.T + np.diag(self.psi)

    def inverse(self) -> np.ndarray:
        inv = np.diag(self.psi_inv)
        if self._m_cho is None:
            return inv
        return inv - self.scaled @ self.m_solve(self.scaled.T)


@dataclass(frozen=True)
class DerivedState:
    sigma_c: CovFactorization
    sigma_r: CovFactorization
    m_c: np.ndarray
    m_r: np.ndarray
    m_c_factor: CovFactorization | None = field(default=None)
    m_r_factor: CovFactorization | None = field(default=None)


def derive(params: TbfaParams) -> DerivedState:
    """Dense covariances and the ``M`` matrices with their Cholesky factors."""
    sc = params.C @ params.C.T + np.diag(params.Psi_c)
    sr = params.R @ params.R.T + np.diag(params.Psi_r)
    m_c = params.C.T @ (params.C / params.Psi_c[:, None]) + np.eye(params.q_c)
    m_r = params.R.T @ (params.R / params.Psi_r[:, None]) + np.eye(params.q_r)
    return DerivedState(
        sigma_c=CovFactorization.from_matrix(sc),
        sigma_r=CovFactorization.from_matrix(sr),
        m_c=m_c,
        m_r=m_r,
        m_c_factor=CovFactorization.from_matrix(m_c) if params.q_c else None,
        m_r_factor=CovFactorization.from_matrix(m_r) if params.q_r else None,
    )


def structured_covs(params: TbfaParams) -> tuple[LowRankCov, LowRankCov]:
    return LowRankCov(params.C, params.Psi_c), LowRankCov(params.R, params.Psi_r)


def _check_data(params: TbfaParams, x: np.ndarray) -> None:
    if x.shape[-2:] != params.W.shape:
        raise DimensionError(
            f"observations are {x.shape[-2:]} but parameters are {params.W.shape}"
        )


def whitened_residuals(x: np.ndarray, w: np.ndarray, cov_c: LowRankCov,
                       cov_r: LowRankCov) -> tuple[np.ndarray, np.ndarray]:
    """Residuals ``E_n = X_n - W`` and ``Sc^{-1} E_n Sr^{-1}`` for a stack."""
    e = x - w
    n, d_c, d_r = e.shape
    left = cov_c.solve(e.transpose(1, 0, 2).reshape(d_c, n * d_r))
    left = left.reshape(d_c, n, d_r).transpose(2, 1, 0).reshape(d_r, n * d_c)
    both = cov_r.solve(left).reshape(d_r, n, d_c).transpose(1, 2, 0)
    return e, both


def mahalanobis_all(params: TbfaParams, x: np.ndarray,
                    covs: tuple[LowRankCov, LowRankCov] | None = None) -> np.ndarray:
    cov_c, cov_r = covs or structured_covs(params)
    e, white = whitened_residuals(x, params.W, cov_c, cov_r)
    return np.einsum("nij,nij->n", e, white)


def log_density_terms(params: TbfaParams, delta: np.ndarray, logdet_c: float,
                      logdet_r: float) -> np.ndarray:
    """Per-observation log-density given Mahalanobis distances."""
    d_c, d_r = params.d_c, params.d_r
    dim = d_c * d_r
    base = -0.5 * d_r * logdet_c - 0.5 * d_c * logdet_r
    if params.gaussian:
        return base - 0.5 * dim * math.log(2 * math.pi) - 0.5 * delta
    nu = params.nu
    const = gammaln(0.5 * (nu + dim)) - gammaln(0.5 * nu) - 0.5 * dim * math.log(math.pi * nu)
    return base + const - 0.5 * (nu + dim) * np.log1p(delta / nu)


def log_likelihood(params: TbfaParams, data) -> float:
    """Observed-data log-likelihood with all normalizing constants."""
    x = as_dataset(data).observations
    _check_data(params, x)
    cov_c, cov_r = structured_covs(params)
    delta = mahalanobis_all(params, x, (cov_c, cov_r))
    return float(np.sum(log_density_terms(params, delta, cov_c.log_det, cov_r.log_det)))


def free_param_count(d_c: int, d_r: int, q_c: int, q_r: int, gaussian: bool = False) -> int:
    """Number of free parameters after the identification constraints."""
    count = (
        d_c * (q_c + 1) - q_c * (q_c - 1) // 2
        + d_r * (q_r + 1) - q_r * (q_r - 1) // 2
        + d_c * d_r
        + 1
    )
    return count - 1 if gaussian else count


def max_factors(d: int) -> int:
    """Largest q with ``q <= d + (1 - sqrt(1 + 8d)) / 2``, in exact integer arithmetic."""
    if d < 1:
        raise DimensionError("d must be at least 1")
    q = d
    # q is admissible iff 2d + 1 - 2q >= sqrt(1 + 8d)
    while q > 0 and not (2 * d + 1 - 2 * q >= 0 and (2 * d + 1 - 2 * q) ** 2 >= 1 + 8 * d):
        q -= 1
    return q


def _triangularize(loading: np.ndarray, convention: str) -> tuple[np.ndarray, bool]:
    d, q = loading.shape
    if q == 0:
        return loading.copy(), False
    # L' = Q T  =>  L Q = T', which is lower trapezoidal.
    qmat, tmat = np.linalg.qr(loading.T, mode="complete")
    low = loading @ qmat
    k = min(d, q)
    diag = np.array([low[i, i] for i in range(k)])
    scale = max(np.max(np.abs(loading)), 1.0)
    deficient = bool(np.any(np.abs(diag) <= 1e-10 * scale)) or d < q
    for i in range(q):
        if i < d and low[i, i] < 0:
            low[:, i] = -low[:, i]
    low[np.triu_indices(d, 1, q)] = 0.0
    if convention == "reversed":
        low = low[:, ::-1]
    return low, deficient


def identify(params: TbfaParams, convention: str = "lower") -> TbfaParams:
    """Observationally equivalent parameters in a canonical form.

    The first column uniqueness is scaled to one (the scale moves to the
    row side) and each loading matrix is rotated to a triangular shape with
    a nonnegative leading diagonal. ``convention="lower"`` gives the usual
    lower-triangular form (zeros above the diagonal); ``convention="reversed"``
    lists the columns in reverse so the zero pattern sits in the top-left
    corner, i.e. ``C[0, 0] = 0`` when ``q_c = 2``.
    """
    if convention not in ("lower", "reversed"):
        raise ValueError(f"unknown convention {convention!r}")
    a = params.Psi_c[0]
    ra = math.sqrt(a)
    c, dc = _triangularize(params.C / ra, convention)
    r, dr = _triangularize(params.R * ra, convention)
    if dc or dr:
        warnings.warn("loading matrix is rank deficient", IdentificationWarning, stacklevel=2)
    return params.replace(C=c, R=r, Psi_c=params.Psi_c / a, Psi_r=params.Psi_r * a)


def factor_scores(params: TbfaParams, x) -> np.ndarray:
    """Posterior mean of the latent factor matrix given one or more observations."""
    x = np.asarray(x, dtype=float)
    _check_data(params, x)
    cov_c, cov_r = structured_covs(params)
    left = cov_c.m_solve(cov_c.scaled.T) if params.q_c else np.zeros((0, params.d_c))
    right = cov_r.m_solve(cov_r.scaled.T) if params.q_r else np.zeros((0, params.d_r))
    return np.matmul(np.matmul(left, x - params.W), right.T)


def tau_weights(params: TbfaParams, data) -> np.ndarray:
    """Expected latent scale weight per observation; small values flag outliers."""
    x = as_dataset(data).observations
    _check_data(params, x)
    if params.gaussian:
        return np.ones(x.shape[0])
    delta = mahalanobis_all(params, x)
    dim = params.d_c * params.d_r
    return (params.nu + dim) / (params.nu + delta)


def varimax_criterion(loading: np.ndarray) -> float:
    sq = loading ** 2
    return float(np.sum(np.mean(sq ** 2, axis=0) - np.mean(sq, axis=0) ** 2))


def varimax(loading, tol: float = 1e-8, max_sweeps: int = 500) -> np.ndarray:
    """Orthogonal varimax rotation by sweeps of pairwise planar rotations."""
    lam = np.array(loading, dtype=float)
    d, q = lam.shape
    if q < 2:
        return lam
    crit = varimax_criterion(lam)
    for _ in range(max_sweeps):
        for i in range(q - 1):
            for j in range(i + 1, q):
                x, y = lam[:, i], lam[:, j]
                u = x * x - y * y
                v = 2.0 * x * y
                num = 2.0 * (np.sum(u * v) - np.sum(u) * np.sum(v) / d)
                den = np.sum(u * u - v * v) - (np.sum(u) ** 2 - np.sum(v) ** 2) / d
                phi = 0.25 * math.atan2(num, den)
                cs, sn = math.cos(phi), math.sin(phi)
                lam[:, i], lam[:, j] = cs * x + sn * y, -sn * x + cs * y
        new = varimax_criterion(lam)
        if new - crit < tol:
            break
        crit = new
    return lam
