"""Synthetic data generators, outlier injection, error metrics and the
benchmark runners (convergence, robustness, estimator accuracy).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    CovFactorization,
    RngStream,
    child_seed,
    rng_stream,
    sample_matrix_normal,
    sample_mt,
)
from .errors import ConfigurationError
from .estimation import ALGORITHMS, FitConfig, fit, initialize
from .inference import ParamLayout, standard_errors
from .model import IdentificationWarning, MatrixDataset, TbfaParams, derive, identify

KINDS = ("bfa_data1", "bfa_data2", "bfa_data3", "tbfa_accuracy")
FAMILIES = ("FC", "OC", "FC_OC")
SITUATIONS = {
    "I": (-100.0, 100.0),
    "II": (-10000.0, 10000.0),
    "III": (100.0, 110.0),
    "IV": (10000.0, 11000.0),
}
METHODS = ("tBFA", "BFA", "tFA", "FA")

ACCURACY_C = np.array([[-1.03, -0.78, -1.35, -1.05, -2.10],
                       [3.47, -4.39, 6.99, -3.44, -2.83]]).T
ACCURACY_R = np.array([[-1.12, -1.40, -1.45, -1.54, -1.15],
                       [-2.15, -5.44, -4.71, 6.28, 2.04]]).T


@dataclass(frozen=True)
class GeneratorSpec:
    """Named parameter recipe plus sample size.

    ``overrides`` may replace ``nu`` (turning a Gaussian recipe into a t one),
    ``d_c`` (for the high-dimensional recipe) or any TbfaParams field.
    """

    kind: str
    n: int
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown generator kind {self.kind!r}")
        if self.n < 1:
            raise ConfigurationError("n must be positive")


@dataclass(frozen=True)
class OutlierSpec:
    family: str
    situation: str
    proportion: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown outlier family {self.family!r}")
        if self.situation not in SITUATIONS:
            raise ConfigurationError(f"unknown situation {self.situation!r}")
        if not 0.0 <= self.proportion < 0.5:
            raise ConfigurationError("proportion must lie in [0, 0.5)")

    @classmethod
    def parse(cls, text: str) -> "OutlierSpec":
        """Parse ``FAMILY:SITUATION:P``, e.g. ``FC:I:0.05``."""
        try:
            family, situation, p = text.split(":")
            return cls(family.upper().replace("+", "_"), situation.upper(), float(p))
        except ValueError as exc:
            raise ConfigurationError(f"bad contamination spec {text!r}: {exc}") from exc


def _orthonormal(rng: RngStream, d: int, q: int) -> np.ndarray:
    qmat, _ = np.linalg.qr(rng.standard_normal((d, q)))
    return qmat


def truth_params(spec: GeneratorSpec, rng: RngStream) -> TbfaParams:
    """Ground-truth parameters for a named recipe."""
    ov = dict(spec.overrides)
    if spec.kind == "tbfa_accuracy":
        params = TbfaParams(
            W=np.zeros((5, 5)), C=ACCURACY_C, Psi_c=np.array([0.1, 0.2, 0.3, 0.4, 0.5]),
            R=ACCURACY_R, Psi_r=np.array([0.2, 0.3, 0.4, 0.5, 0.6]), nu=3.0,
        )
    else:
        d_c = int(ov.pop("d_c", 2000 if spec.kind == "bfa_data3" else 10))
        d_r = 10
        l_c = np.sqrt([5.0, 4.5, 4.0])
        l_r = np.sqrt([10.0, 9.0, 8.0])
        if spec.kind == "bfa_data2":
            psi_c, psi_r = np.linspace(0.05, 0.1, d_c), np.linspace(0.1, 0.2, d_r)
        else:
            psi_c, psi_r = np.linspace(0.5, 1.0, d_c), np.linspace(1.0, 2.0, d_r)
        params = TbfaParams(
            W=np.zeros((d_c, d_r)),
            C=_orthonormal(rng, d_c, 3) * l_c,
            Psi_c=psi_c,
            R=_orthonormal(rng, d_r, 3) * l_r,
            Psi_r=psi_r,
            gaussian=True,
        )
    ov.pop("d_c", None)
    if "nu" in ov:
        nu = ov.pop("nu")
        gaussian = nu is None or not math.isfinite(float(nu))
        params = params.replace(nu=float(nu) if not gaussian else math.inf, gaussian=gaussian)
    if ov:
        params = params.replace(**ov)
    return params


def draw(params: TbfaParams, n: int, rng: RngStream) -> np.ndarray:
    """``n`` observations from the model (matrix-normal in Gaussian mode)."""
    st = derive(params)
    if params.gaussian:
        return sample_matrix_normal(params.W, st.sigma_c, st.sigma_r, rng, size=n)
    return sample_mt(params.W, st.sigma_c, st.sigma_r, params.nu, rng, size=n)


def generate(spec: GeneratorSpec, rng: RngStream) -> tuple[MatrixDataset, TbfaParams]:
    """Dataset and the ground truth it was drawn from."""
    truth = truth_params(spec, rng)
    x = draw(truth, spec.n, rng)
    return MatrixDataset(x, labels=("clean",) * spec.n), truth


def outlier_count(n: int, p: float) -> int:
    """``round(n p / (1 - p))`` with halves rounded up."""
    return int(math.floor(n * p / (1.0 - p) + 0.5))


def _complement(a: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of span(a)."""
    d, q = a.shape
    u, _, _ = np.linalg.svd(a, full_matrices=True)
    return u[:, q:]


def inject_outliers(data: MatrixDataset, truth: TbfaParams, spec: OutlierSpec,
                    rng: RngStream) -> MatrixDataset:
    """Append contaminated observations so their share of the result is ``p``.

    Each outlier is a clean model draw plus ``C_o Z_o R_o'`` where the
    uniform block of ``Z_o`` sits in the factor subspace (FC), in the
    orthogonal complement (OC) or in both (FC_OC).
    """
    m = outlier_count(data.n, spec.proportion)
    if m == 0:
        return data
    lo, hi = SITUATIONS[spec.situation]
    c_fc, r_fc = truth.C, truth.R
    if spec.family == "FC":
        left, right = c_fc, r_fc
    elif spec.family == "OC":
        left, right = _complement(c_fc), _complement(r_fc)
    else:
        left = np.hstack([c_fc, _complement(c_fc)])
        right = np.hstack([r_fc, _complement(r_fc)])
    base = draw(truth, m, rng)
    z = rng.uniform(lo, hi, size=(m, left.shape[1], right.shape[1]))
    x_o = base + left @ z @ right.T
    labels = tuple(data.labels or ("clean",) * data.n) + (spec.family,) * m
    return MatrixDataset(np.concatenate([data.observations, x_o]), labels=labels)


def _kron_sq_norm(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(a * a) * np.sum(b * b))


def covariance_factors(params: TbfaParams) -> tuple[np.ndarray, np.ndarray]:
    sc = params.C @ params.C.T + np.diag(params.Psi_c)
    sr = params.R @ params.R.T + np.diag(params.Psi_r)
    return sc, sr


def rel_cov_error(truth: TbfaParams, est: TbfaParams) -> float:
    """``||Sigma - Sigma_hat||_F / ||Sigma||_F`` with ``Sigma = Sigma_r (x) Sigma_c``.

    ``est`` may also be a vector model fitted to column-major vectorized
    data (``d_c * d_r`` rows, one column). Kronecker products are never
    formed: ``||A(x)B - C(x)D||^2 = |A|^2|B|^2 + |C|^2|D|^2 - 2 tr(A'C) tr(B'D)``.
    """
    sc, sr = covariance_factors(truth)
    ec, er = covariance_factors(est)
    norm2 = _kron_sq_norm(sr, sc)
    if est.d_c == truth.d_c and est.d_r == truth.d_r:
        diff2 = norm2 + _kron_sq_norm(er, ec) - 2.0 * np.sum(sr * er) * np.sum(sc * ec)
    elif est.d_r == 1 and est.d_c == truth.d_c * truth.d_r:
        dense = ec * er[0, 0]
        d_c, d_r = truth.d_c, truth.d_r
        blocks = dense.reshape(d_r, d_c, d_r, d_c)       # [j, i, l, k] -> Sigma[(j,i),(l,k)]
        cross = np.einsum("jl,jilk,ik->", sr, blocks, sc)
        diff2 = norm2 + float(np.sum(dense * dense)) - 2.0 * cross
    else:
        raise ConfigurationError("estimate dimensions do not match the truth")
    return math.sqrt(max(diff2, 0.0) / norm2)


def vectorize(data: MatrixDataset) -> MatrixDataset:
    """Column-major vectorization: each ``d_c x d_r`` matrix becomes a ``d_c d_r x 1`` one."""
    x = data.observations
    n = x.shape[0]
    v = x.transpose(0, 2, 1).reshape(n, -1, 1)
    return MatrixDataset(v, labels=data.labels)


def fit_method(method: str, data: MatrixDataset, q_c: int, q_r: int, seed: int,
               algorithm: str = "PX-ECME", t_max: int = 1000):
    """Fit one of tBFA, BFA, tFA, FA; vector methods use ``q = q_c q_r`` factors."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    gaussian = method in ("BFA", "FA")
    cfg = FitConfig(algorithm=algorithm, gaussian_mode=gaussian, seed=seed, t_max=t_max)
    if method in ("tFA", "FA"):
        return fit(vectorize(data), q_c * q_r, 0, cfg)
    return fit(data, q_c, q_r, cfg)


# ---------------------------------------------------------------------------
# runners


def convergence_study(kinds=("bfa_data1", "bfa_data2"), algorithms=ALGORITHMS, seed: int = 0,
                      n: int | None = None, d_c_data3: int = 500, tol: float = 1e-8,
                      t_max: int = 1000) -> dict:
    """Traces of every algorithm from a shared starting point per dataset."""
    out = {}
    for k, kind in enumerate(kinds):
        overrides = {"d_c": d_c_data3} if kind == "bfa_data3" else {}
        size = n or (100 if kind == "bfa_data3" else 500)
        data, truth = generate(GeneratorSpec(kind, size, overrides), rng_stream(seed, k))
        start = initialize(data, truth.q_c, truth.q_r, FitConfig(), rng_stream(seed, k, 1))
        runs = {}
        for alg in algorithms:
            res = fit(data, truth.q_c, truth.q_r,
                      FitConfig(algorithm=alg, init=start, tol=tol, t_max=t_max))
            runs[alg] = {
                "iterations": res.iterations,
                "converged": res.converged,
                "elapsed_seconds": res.elapsed_seconds,
                "loglik": res.loglik_trace.tolist(),
                "seconds": res.time_trace.tolist(),
            }
        out[kind] = runs
    return out


def robustness_study(p_values, families=("FC",), situations=("I",), methods=METHODS,
                     reps: int = 10, seed: int = 0, n: int = 1000,
                     algorithm: str = "PX-ECME") -> list[dict]:
    """Average relative covariance error per (family, situation, p, method).

    Rows carry both the raw ratio and the ratio times 100.
    """
    rows = []
    for fi, family in enumerate(families):
        for si, situation in enumerate(situations):
            for pi, p in enumerate(p_values):
                errs = {m: [] for m in methods}
                for rep in range(reps):
                    rng = rng_stream(seed, fi, si, pi, rep)
                    clean, truth = generate(GeneratorSpec("bfa_data1", n), rng)
                    data = inject_outliers(clean, truth, OutlierSpec(family, situation, p), rng)
                    for m in methods:
                        res = fit_method(m, data, truth.q_c, truth.q_r,
                                         child_seed(seed, fi, si, pi, rep), algorithm)
                        errs[m].append(rel_cov_error(truth, res.params))
                for m in methods:
                    val = float(np.mean(errs[m]))
                    rows.append({"family": family, "situation": situation, "p": p, "method": m,
                                 "relerr": val, "relerr_x100": 100.0 * val, "reps": reps})
    return rows


def accuracy_study(reps_by_n: dict[int, int], seed: int = 0, algorithm: str = "PX-ECME",
                   restarts: int = 1) -> dict[int, dict[str, dict[str, float]]]:
    """RMSE, ESTD and IMSE of every free parameter for each sample size.

    Estimates and the truth are put in the identified form whose zero
    pattern sits in the top-left corner of each loading matrix, with the
    first column uniqueness scaled to one.
    """
    spec0 = GeneratorSpec("tbfa_accuracy", 1)
    truth = identify(truth_params(spec0, rng_stream(seed)), "reversed")
    layout = ParamLayout.for_params(truth, "reversed")
    names = layout.names
    target = layout.values(truth)
    out = {}
    for ni, (n, reps) in enumerate(sorted(reps_by_n.items())):
        est, ses = [], []
        for rep in range(reps):
            rng = rng_stream(seed, 1, ni, rep)
            x = draw(truth, n, rng)
            best = None
            for k in range(restarts):
                cfg = FitConfig(algorithm=algorithm, seed=child_seed(seed, 1, ni, rep, k),
                                convention="reversed")
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", IdentificationWarning)
                    res = fit(x, 2, 2, cfg)
                if best is None or res.loglik > best.loglik:
                    best = res
            est.append(layout.values(best.params))
            se = standard_errors(best.params, n, convention="reversed")
            ses.append([se[k] for k in names])
        est = np.array(est)
        ses = np.array(ses)
        rmse = np.sqrt(np.mean((est - target) ** 2, axis=0))
        estd = np.std(est, axis=0, ddof=1) if reps > 1 else np.zeros(len(names))
        imse = ses.mean(axis=0)
        out[n] = {name: {"rmse": float(rmse[i]), "estd": float(estd[i]), "imse": float(imse[i]),
                         "truth": float(target[i])}
                  for i, name in enumerate(names)}
    return out
