"""Robust bilinear factor analysis for matrix-valued observations."""

from __future__ import annotations

from .distributions import CovFactorization, digamma, trigamma
from .estimation import FitConfig, FitResult, fit
from .model import MatrixDataset, TbfaParams, identify, log_likelihood

__version__ = "0.1.0"

__all__ = [
    "CovFactorization",
    "FitConfig",
    "FitResult",
    "MatrixDataset",
    "TbfaParams",
    "digamma",
    "fit",
    "identify",
    "log_likelihood",
    "trigamma",
]
