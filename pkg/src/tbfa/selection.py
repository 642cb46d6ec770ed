"""BIC and grid search over the numbers of column and row factors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DimensionError, SelectionError, TbfaError
from .estimation import FitConfig, FitResult, fit_best
from .model import as_dataset, free_param_count, max_factors


def bic(result: FitResult, data) -> float:
    """``-2 loglik + D ln N`` for a fit on ``data``."""
    ds = as_dataset(data)
    p = result.params
    d = free_param_count(p.d_c, p.d_r, p.q_c, p.q_r, gaussian=p.gaussian)
    return -2.0 * result.loglik + d * math.log(ds.n)


@dataclass(frozen=True)
class GridCell:
    bic: float
    loglik: float
    converged: bool
    nu_hat: float
    n_params: int
    error: str | None = None


@dataclass
class SelectionReport:
    grid: dict[tuple[int, int], GridCell] = field(default_factory=dict)
    best: tuple[int, int] | None = None

    def surface(self) -> list[dict]:
        return [
            {"q_c": qc, "q_r": qr, "bic": c.bic, "loglik": c.loglik, "converged": c.converged,
             "nu_hat": c.nu_hat, "n_params": c.n_params, "error": c.error}
            for (qc, qr), c in sorted(self.grid.items())
        ]


def _pick_best(grid: dict[tuple[int, int], GridCell]) -> tuple[int, int] | None:
    ok = {k: c for k, c in grid.items() if c.error is None and math.isfinite(c.bic)}
    pool = {k: c for k, c in ok.items() if c.converged} or ok
    if not pool:
        return None
    return min(pool, key=lambda k: (pool[k].bic, pool[k].n_params, k))


def grid_select(data, q_c_range, q_r_range, config: FitConfig | None = None,
                restarts: int = 3) -> SelectionReport:
    """Fit every ``(q_c, q_r)`` cell and pick the BIC minimizer.

    Cells keep the best of ``restarts`` random starts. Ties go to the model
    with fewer parameters, then to the smaller pair. Cells that did not
    converge within ``t_max`` are only considered when none converged.
    """
    ds = as_dataset(data)
    config = config or FitConfig(algorithm="PX-ECME")
    q_c_range, q_r_range = list(q_c_range), list(q_r_range)
    for q, d, side in [(q, ds.d_c, "column") for q in q_c_range] + \
                      [(q, ds.d_r, "row") for q in q_r_range]:
        if q < 0 or q > max_factors(d):
            raise DimensionError(f"{side} factor count {q} exceeds max_factors({d}) = {max_factors(d)}")
    report = SelectionReport()
    for q_c in q_c_range:
        for q_r in q_r_range:
            n_params = free_param_count(ds.d_c, ds.d_r, q_c, q_r, gaussian=config.gaussian_mode)
            try:
                res = fit_best(ds, q_c, q_r, config, restarts)
            except (TbfaError, ArithmeticError) as exc:
                report.grid[(q_c, q_r)] = GridCell(math.inf, -math.inf, False, math.nan,
                                                   n_params, error=str(exc))
                continue
            report.grid[(q_c, q_r)] = GridCell(bic(res, ds), res.loglik, res.converged,
                                               res.params.nu, n_params)
    report.best = _pick_best(report.grid)
    if report.best is None:
        raise SelectionError("every grid cell failed",
                             {k: c.error for k, c in report.grid.items()})
    return report
