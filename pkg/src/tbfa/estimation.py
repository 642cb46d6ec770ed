"""Maximum-likelihood fitting: ECME, AECM and their parameter-expanded
variants, plus the building blocks they share.

All four algorithms alternate between the column side and the row side of
the model. Covariance solves go through :class:`~tbfa.model.LowRankCov`
so the cost per iteration stays linear in the larger dimension except for
the eigendecomposition used by the ECME-type loading update.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .distributions import RngStream, child_seed, digamma, rng_stream
from .errors import ConfigurationError, DimensionError, DivergenceError, EmptyDataError
from .model import (
    ETA,
    NU_MAX,
    NU_MIN,
    LowRankCov,
    TbfaParams,
    as_dataset,
    identify,
    log_density_terms,
    max_factors,
    tau_weights,
    whitened_residuals,
)

ALGORITHMS = ("ECME", "PX-ECME", "AECM", "PX-AECM")

Monitor = Callable[[str, TbfaParams], None]


@dataclass(frozen=True)
class FitConfig:
    """Settings shared by every fitting algorithm.

    ``init`` is either ``"random"`` or a :class:`TbfaParams` to start from.
    ``convention`` selects the identification form of the returned params.
    """

    algorithm: str = "ECME"
    tol: float = 1e-8
    t_max: int = 1000
    eta: float = ETA
    nu_bounds: tuple[float, float] = (NU_MIN, NU_MAX)
    gaussian_mode: bool = False
    init: object = "random"
    seed: int = 0
    convention: str = "lower"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(
                f"unknown algorithm {self.algorithm!r}; expected one of {', '.join(ALGORITHMS)}"
            )
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")
        if self.t_max < 1:
            raise ConfigurationError("t_max must be at least 1")
        lo, hi = self.nu_bounds
        if not 0 < lo < hi:
            raise ConfigurationError("nu bounds must satisfy 0 < nu_min < nu_max")
        if not self.eta > 0:
            raise ConfigurationError("eta must be positive")
        if not (self.init == "random" or isinstance(self.init, TbfaParams)):
            raise ConfigurationError("init must be 'random' or a TbfaParams instance")


@dataclass
class FitResult:
    params: TbfaParams
    loglik_trace: np.ndarray
    iterations: int
    elapsed_seconds: float
    converged: bool
    final_tau: np.ndarray
    algorithm: str = "ECME"
    nu_saturated: bool = False
    time_trace: np.ndarray | None = field(default=None, repr=False)
    raw_params: TbfaParams | None = field(default=None, repr=False)

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


# ---------------------------------------------------------------------------
# building blocks


def initialize(data, q_c: int, q_r: int, config: FitConfig | None = None,
               rng: RngStream | None = None) -> TbfaParams:
    """Random starting point.

    The mean is the sample mean, loadings have random orthonormal columns
    and the uniquenesses are half the row and column sample variances.
    Column-side quantities carry the overall variance level ``v``; row-side
    quantities are divided by ``v`` so that the Kronecker product has the
    scale of the data.
    """
    config = config or FitConfig()
    rng = rng if rng is not None else rng_stream(config.seed)
    x = as_dataset(data).observations
    n, d_c, d_r = x.shape
    _check_factors(d_c, d_r, q_c, q_r)
    w = x.mean(axis=0)
    resid2 = (x - w) ** 2
    v_row = resid2.mean(axis=(0, 2))
    v_col = resid2.mean(axis=(0, 1))
    v = float(resid2.mean())
    eta = config.eta
    if v <= 0:
        v = 1.0
    c = _random_orthonormal(rng, d_c, q_c) * math.sqrt(v)
    r = _random_orthonormal(rng, d_r, q_r)
    psi_c = np.maximum(0.5 * v_row, eta)
    psi_r = np.maximum(0.5 * v_col / v, eta)
    return TbfaParams(W=w, C=c, Psi_c=psi_c, R=r, Psi_r=psi_r, nu=10.0,
                      gaussian=config.gaussian_mode)


def _random_orthonormal(rng: RngStream, d: int, q: int) -> np.ndarray:
    if q == 0:
        return np.zeros((d, 0))
    qmat, rmat = np.linalg.qr(rng.standard_normal((d, q)))
    return qmat * np.sign(np.where(np.diag(rmat) == 0, 1.0, np.diag(rmat)))


def _check_factors(d_c: int, d_r: int, q_c: int, q_r: int) -> None:
    for d, q, side in ((d_c, q_c, "column"), (d_r, q_r, "row")):
        if q < 0 or q > max_factors(d):
            raise DimensionError(
                f"{side} factor count {q} outside [0, {max_factors(d)}] for dimension {d}"
            )


def ecme_update_W(data, tau) -> np.ndarray:
    """Weighted mean of the observations."""
    x = as_dataset(data).observations
    tau = np.asarray(tau, dtype=float)
    return np.tensordot(tau, x, axes=1) / tau.sum()


def _side_scatter(e: np.ndarray, tau: np.ndarray, cov_other: LowRankCov) -> np.ndarray:
    """``sum_n tau_n E_n Sigma_other^{-1} E_n'`` for a stack ``E`` of shape (n, a, b)."""
    n, a, b = e.shape
    f = cov_other.solve(e.reshape(n * a, b).T).T.reshape(n, a, b)
    lhs = (e * tau[:, None, None]).transpose(1, 0, 2).reshape(a, n * b)
    s = lhs @ f.transpose(1, 0, 2).reshape(a, n * b).T
    return 0.5 * (s + s.T)


def robust_col_cov(data, params: TbfaParams, tau) -> np.ndarray:
    """Weighted column scatter ``(1/(N d_r)) sum tau_n E_n Sr^{-1} E_n'``."""
    x = as_dataset(data).observations
    tau = np.asarray(tau, dtype=float)
    n, d_c, d_r = x.shape
    return _side_scatter(x - params.W, tau, LowRankCov(params.R, params.Psi_r)) / (n * d_r)


def robust_row_cov(data, params: TbfaParams, tau) -> np.ndarray:
    """Weighted row scatter ``(1/(N d_c)) sum tau_n E_n' Sc^{-1} E_n``."""
    x = as_dataset(data).observations
    tau = np.asarray(tau, dtype=float)
    n, d_c, d_r = x.shape
    e = (x - params.W).transpose(0, 2, 1)
    return _side_scatter(e, tau, LowRankCov(params.C, params.Psi_c)) / (n * d_c)


def update_loadings_eigen(s, psi, q: int) -> tuple[np.ndarray, int]:
    """Loading maximizing the Gaussian objective for fixed uniquenesses.

    Returns the loading and the number ``q'`` of eigenvalues of the
    normalized scatter that exceed one. Eigenvalues equal to one (up to
    round-off) would only contribute zero columns and are not counted.
    """
    s = np.asarray(s, dtype=float)
    psi = np.asarray(psi, dtype=float)
    d = psi.shape[0]
    if q == 0:
        return np.zeros((d, 0)), 0
    root = np.sqrt(psi)
    s_norm = s / np.outer(root, root)
    lam, vec = np.linalg.eigh(s_norm)
    lam, vec = lam[::-1][:q], vec[:, ::-1][:, :q]
    keep = lam > 1.0 + 1e-12
    q_prime = int(np.sum(keep))
    loading = np.zeros((d, q))
    loading[:, :q_prime] = root[:, None] * vec[:, :q_prime] * np.sqrt(lam[:q_prime] - 1.0)
    return loading, q_prime


def update_psi_sequential(s, loading, psi_old, eta: float = ETA) -> np.ndarray:
    """One ascending sweep of coordinate-wise uniqueness updates.

    Each coordinate maximizes ``-ln|Sigma| - tr(Sigma^{-1} S)`` given the
    others. Work happens in coordinates normalized by ``psi_old``; the
    inverse of the running matrix ``B = D + U U'`` is kept in Woodbury form
    and refreshed by rank-one updates, so a sweep costs O(d^2 q).
    """
    s = np.asarray(s, dtype=float)
    psi_old = np.asarray(psi_old, dtype=float)
    root = np.sqrt(psi_old)
    s_norm = s / np.outer(root, root)
    u = np.asarray(loading, dtype=float) / root[:, None]
    d, q = u.shape
    dvec = np.ones(d)
    psi_new = psi_old.copy()
    if q == 0:
        for i in range(d):
            psi_new[i] = max(s_norm[i, i] * psi_old[i], eta)
        return psi_new
    k = np.linalg.inv(np.eye(q) + u.T @ u)
    g = u.copy()            # D^{-1} U
    p = s_norm @ g          # S D^{-1} U
    for i in range(d):
        ui = u[i]
        di = dvec[i]
        kui = k @ ui
        b = -(g @ kui) / di
        b[i] += 1.0 / di
        bii = b[i]
        sb = s_norm[:, i] / di - (p @ kui) / di
        omega = (sb @ b - bii) / (bii * bii)
        new_psi = max((1.0 + omega) * psi_old[i], eta)
        psi_new[i] = new_psi
        d_new = new_psi / psi_old[i]
        gamma = 1.0 / d_new - 1.0 / di
        if gamma != 0.0:
            k -= gamma * np.outer(kui, kui) / (1.0 + gamma * (ui @ kui))
            p += gamma * np.outer(s_norm[:, i], ui)
            g[i] = ui / d_new
            dvec[i] = d_new
    return psi_new


def _bisect_log(func, lo: float, hi: float, max_iter: int = 200,
                rel_width: float = 1e-15) -> tuple[float, bool]:
    f_lo, f_hi = func(lo), func(hi)
    if f_lo > 0 and f_hi > 0:
        return hi, True
    if f_lo < 0 and f_hi < 0:
        return lo, True
    if f_lo == 0:
        return lo, False
    if f_hi == 0:
        return hi, False
    a, b = math.log(lo), math.log(hi)
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        f_mid = func(math.exp(mid))
        if f_mid == 0:
            return math.exp(mid), False
        if (f_mid > 0) == (f_lo > 0):
            a, f_lo = mid, f_mid
        else:
            b = mid
        if b - a <= rel_width:
            break
    return math.exp(0.5 * (a + b)), False


def nu_score_ecme(nu: float, deltas, dim: int) -> float:
    """Derivative of the mean log-likelihood in ``nu`` (up to a factor 1/2)."""
    deltas = np.asarray(deltas, dtype=float)
    w = (nu + dim) / (nu + deltas)
    return (
        -digamma(0.5 * nu) + math.log(0.5 * nu) + 1.0
        + digamma(0.5 * (nu + dim)) - math.log(0.5 * (nu + dim))
        + float(np.mean(np.log(w) - w))
    )


def solve_nu_ecme(deltas, dim: int, nu_bounds=(NU_MIN, NU_MAX)) -> tuple[float, bool]:
    """Likelihood-maximizing ``nu`` for fixed distances; returns ``(nu, saturated)``."""
    deltas = np.asarray(deltas, dtype=float)
    return _bisect_log(lambda v: nu_score_ecme(v, deltas, dim), *nu_bounds)


def solve_nu_em(mean_log_tau_minus_tau: float, nu_bounds=(NU_MIN, NU_MAX),
                alpha: float = 1.0) -> tuple[float, bool]:
    """Root of ``ln(nu/(2 alpha)) - digamma(nu/2) + 1 + c = 0``.

    ``c`` is the average of ``E[ln tau] - E[tau]/alpha`` under the current
    posterior; ``alpha`` is the expansion parameter (one for plain AECM).
    """
    c = mean_log_tau_minus_tau - math.log(alpha)
    return _bisect_log(lambda v: math.log(0.5 * v) - digamma(0.5 * v) + 1.0 + c, *nu_bounds)


# ---------------------------------------------------------------------------
# iteration engines


class _Workspace:
    """Data and repeated bookkeeping for one fit."""

    def __init__(self, x: np.ndarray, config: FitConfig):
        self.x = x
        self.n, self.d_c, self.d_r = x.shape
        self.dim = self.d_c * self.d_r
        self.config = config
        self.gaussian = config.gaussian_mode

    def covs(self, p: TbfaParams) -> tuple[LowRankCov, LowRankCov]:
        return LowRankCov(p.C, p.Psi_c), LowRankCov(p.R, p.Psi_r)

    def deltas(self, p: TbfaParams, covs=None):
        cov_c, cov_r = covs or self.covs(p)
        e, white = whitened_residuals(self.x, p.W, cov_c, cov_r)
        return np.einsum("nij,nij->n", e, white), cov_c, cov_r

    def loglik(self, p: TbfaParams, delta, cov_c, cov_r) -> float:
        return float(np.sum(log_density_terms(p, delta, cov_c.log_det, cov_r.log_det)))

    def weights(self, nu: float, delta) -> np.ndarray:
        if self.gaussian:
            return np.ones(self.n)
        return (nu + self.dim) / (nu + delta)


def _ecme_step(ws: _Workspace, p: TbfaParams, delta, cov_r: LowRankCov, px: bool,
               monitor: Monitor | None) -> tuple[TbfaParams, bool]:
    eta = ws.config.eta
    tau = ws.weights(p.nu, delta)
    scale = ws.n / tau.sum() if px else 1.0
    w = np.tensordot(tau, ws.x, axes=1) / tau.sum()
    p = p.replace(W=w)
    if monitor:
        monitor("W", p)
    e = ws.x - w
    s_c = _side_scatter(e, tau, cov_r) * (scale / (ws.n * ws.d_r))
    c, _ = update_loadings_eigen(s_c, p.Psi_c, p.q_c)
    psi_c = update_psi_sequential(s_c, c, p.Psi_c, eta)
    p = p.replace(C=c, Psi_c=psi_c)
    if monitor:
        monitor("column", p)
    cov_c = LowRankCov(c, psi_c)
    s_r = _side_scatter(e.transpose(0, 2, 1), tau, cov_c) * (scale / (ws.n * ws.d_c))
    r, _ = update_loadings_eigen(s_r, p.Psi_r, p.q_r)
    psi_r = update_psi_sequential(s_r, r, p.Psi_r, eta)
    p = p.replace(R=r, Psi_r=psi_r)
    if monitor:
        monitor("row", p)
    saturated = False
    if not ws.gaussian:
        delta, _, _ = ws.deltas(p)
        nu, saturated = solve_nu_ecme(delta, ws.dim, ws.config.nu_bounds)
        p = p.replace(nu=nu)
        if monitor:
            monitor("nu", p)
    return p, saturated


def _fa_em_side(e: np.ndarray, tau: np.ndarray, cov_other: LowRankCov, loading: np.ndarray,
                psi: np.ndarray, count: float, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """One factor-analysis EM step on one side of the model.

    ``e`` has shape (n, a, b) with the side being updated on axis 1;
    ``count`` is the effective number of a-vectors (N times b, or the
    expanded-model equivalent). Only ``T beta'``, ``beta T beta'`` and
    ``diag(T)`` are formed, where ``T = sum tau_n E_n Sigma_other^{-1} E_n'``.
    """
    n, a, b = e.shape
    q = loading.shape[1]
    f = cov_other.solve(e.reshape(n * a, b).T).T.reshape(n, a, b)  # E Sigma_other^{-1}
    diag_t = np.einsum("n,nij,nij->i", tau, e, f)
    if q == 0:
        return loading, np.maximum(diag_t / count, floor)
    cur = LowRankCov(loading, psi)
    beta = cur.m_solve(cur.scaled.T)                  # M^{-1} L' Psi^{-1}, q x a
    be = np.matmul(beta, e)                           # (n, q, b)
    t_beta = np.einsum("n,nib,nkb->ik", tau, f, be)   # T beta', a x q
    btb = beta @ t_beta
    inner = count * cur.m_solve(np.eye(q)) + btb
    new_loading = np.linalg.solve(inner.T, t_beta.T).T
    new_psi = (diag_t - np.sum(new_loading * t_beta, axis=1)) / count
    return new_loading, np.maximum(new_psi, floor)


def _aecm_step(ws: _Workspace, p: TbfaParams, delta, px: bool,
               monitor: Monitor | None) -> tuple[TbfaParams, bool]:
    eta = ws.config.eta
    dim = ws.dim
    saturated = False
    if ws.gaussian:
        w = ws.x.mean(axis=0)
        alpha = 1.0
        p = p.replace(W=w)
    else:
        nu_old = p.nu
        tau = (nu_old + dim) / (nu_old + delta)
        e_log_tau = digamma(0.5 * (nu_old + dim)) - np.log(0.5 * (nu_old + delta))
        alpha = float(tau.mean()) if px else 1.0
        w = np.tensordot(tau, ws.x, axes=1) / tau.sum()
        nu, saturated = solve_nu_em(float(np.mean(e_log_tau - tau / alpha)),
                                    ws.config.nu_bounds, alpha)
        p = p.replace(W=w, nu=nu)
    if monitor:
        monitor("W,nu", p if alpha == 1.0 else _reduce(p, alpha, eta))
    e = ws.x - p.W
    # cycle 2: column side. p holds the expanded column parameters.
    delta, cov_c, cov_r = ws.deltas(p)
    tau = _expanded_tau(ws, p.nu, delta, alpha)
    c, psi_c = _fa_em_side(e, tau, cov_r, p.C, p.Psi_c, ws.n * ws.d_r, eta * alpha)
    p = p.replace(C=c, Psi_c=psi_c)
    if monitor:
        monitor("column", p if alpha == 1.0 else _reduce(p, alpha, eta))
    # cycle 3: row side
    delta, cov_c, cov_r = ws.deltas(p)
    tau = _expanded_tau(ws, p.nu, delta, alpha)
    r, psi_r = _fa_em_side(e.transpose(0, 2, 1), tau, cov_c, p.R, p.Psi_r,
                           ws.n * ws.d_c, eta)
    p = p.replace(R=r, Psi_r=psi_r)
    if alpha != 1.0:
        p = _reduce(p, alpha, eta)
    if monitor:
        monitor("row", p)
    return p, saturated


def _expanded_tau(ws: _Workspace, nu: float, delta, alpha: float) -> np.ndarray:
    """Posterior mean of the expanded scale variable given expanded distances."""
    if ws.gaussian:
        return np.ones(ws.n)
    return alpha * (nu + ws.dim) / (nu + alpha * delta)


def _reduce(p: TbfaParams, alpha: float, eta: float) -> TbfaParams:
    return p.replace(C=p.C / math.sqrt(alpha), Psi_c=np.maximum(p.Psi_c / alpha, eta))


def _run(data, q_c: int, q_r: int, config: FitConfig, monitor: Monitor | None) -> FitResult:
    x = as_dataset(data).observations
    if x.shape[0] == 0:
        raise EmptyDataError("no observations")
    _, d_c, d_r = x.shape
    _check_factors(d_c, d_r, q_c, q_r)
    ws = _Workspace(x, config)
    if isinstance(config.init, TbfaParams):
        p = config.init
        if p.W.shape != (d_c, d_r) or p.q_c != q_c or p.q_r != q_r:
            raise DimensionError("initial parameters do not match the data and factor counts")
        if p.gaussian != config.gaussian_mode:
            p = p.replace(gaussian=config.gaussian_mode, nu=10.0 if not config.gaussian_mode else p.nu)
    else:
        p = initialize(x, q_c, q_r, config, rng_stream(config.seed))
    algorithm = config.algorithm
    px = algorithm.startswith("PX")
    ecme_type = algorithm.endswith("ECME")
    start = time.monotonic()
    delta, cov_c, cov_r = ws.deltas(p)
    trace = [ws.loglik(p, delta, cov_c, cov_r)]
    times = [time.monotonic() - start]
    if not math.isfinite(trace[0]):
        raise DivergenceError("initial log-likelihood is not finite", 0)
    converged = False
    saturated = False
    it = 0
    for it in range(1, config.t_max + 1):
        if ecme_type:
            p, saturated = _ecme_step(ws, p, delta, cov_r, px, monitor)
        else:
            p, saturated = _aecm_step(ws, p, delta, px, monitor)
        delta, cov_c, cov_r = ws.deltas(p)
        ll = ws.loglik(p, delta, cov_c, cov_r)
        if not math.isfinite(ll):
            raise DivergenceError(f"log-likelihood became non-finite at iteration {it}", it)
        trace.append(ll)
        times.append(time.monotonic() - start)
        if abs(1.0 - trace[-2] / ll) < config.tol:
            converged = True
            break
    elapsed = time.monotonic() - start
    tau = ws.weights(p.nu, delta)
    return FitResult(
        params=identify(p, config.convention),
        loglik_trace=np.array(trace),
        iterations=it,
        elapsed_seconds=elapsed,
        converged=converged,
        final_tau=tau,
        algorithm=algorithm,
        nu_saturated=saturated,
        time_trace=np.array(times),
        raw_params=p,
    )


def _with_algorithm(config: FitConfig | None, algorithm: str) -> FitConfig:
    config = config or FitConfig()
    if config.algorithm == algorithm:
        return config
    return FitConfig(**{**config.__dict__, "algorithm": algorithm})


def fit_ecme(data, q_c: int, q_r: int, config: FitConfig | None = None,
             monitor: Monitor | None = None) -> FitResult:
    return _run(data, q_c, q_r, _with_algorithm(config, "ECME"), monitor)


def fit_px_ecme(data, q_c: int, q_r: int, config: FitConfig | None = None,
                monitor: Monitor | None = None) -> FitResult:
    return _run(data, q_c, q_r, _with_algorithm(config, "PX-ECME"), monitor)


def fit_aecm(data, q_c: int, q_r: int, config: FitConfig | None = None,
             monitor: Monitor | None = None) -> FitResult:
    return _run(data, q_c, q_r, _with_algorithm(config, "AECM"), monitor)


def fit_px_aecm(data, q_c: int, q_r: int, config: FitConfig | None = None,
                monitor: Monitor | None = None) -> FitResult:
    return _run(data, q_c, q_r, _with_algorithm(config, "PX-AECM"), monitor)


def fit(data, q_c: int, q_r: int, config: FitConfig | None = None,
        monitor: Monitor | None = None) -> FitResult:
    """Fit with the algorithm named in ``config`` and return identified params."""
    config = config or FitConfig()
    if config.algorithm not in ALGORITHMS:
        raise ConfigurationError(f"unknown algorithm {config.algorithm!r}")
    return _run(data, q_c, q_r, config, monitor)


def fit_best(data, q_c: int, q_r: int, config: FitConfig | None = None,
             restarts: int = 1) -> FitResult:
    """Best of ``restarts`` random starts, ranked by final log-likelihood.

    Restart ``k`` uses a seed derived from ``config.seed`` and ``k``, so the
    result does not depend on evaluation order.
    """
    config = config or FitConfig()
    best = None
    for k in range(max(1, restarts)):
        cfg = FitConfig(**{**config.__dict__, "seed": child_seed(config.seed, k)})
        res = fit(data, q_c, q_r, cfg)
        if best is None or res.loglik > best.loglik:
            best = res
    return best


__all__ = [
    "ALGORITHMS",
    "FitConfig",
    "FitResult",
    "initialize",
    "ecme_update_W",
    "robust_col_cov",
    "robust_row_cov",
    "update_loadings_eigen",
    "update_psi_sequential",
    "solve_nu_ecme",
    "solve_nu_em",
    "nu_score_ecme",
    "fit",
    "fit_best",
    "fit_ecme",
    "fit_aecm",
    "fit_px_ecme",
    "fit_px_aecm",
    "tau_weights",
]
