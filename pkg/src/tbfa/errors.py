"""Exception hierarchy shared by the library and the command line."""

from __future__ import annotations


class TbfaError(Exception):
    """Base class for all library errors."""


class DomainError(TbfaError, ValueError):
    """An argument lies outside the domain of a function."""


class DimensionError(TbfaError, ValueError):
    """Array shapes are incompatible."""


class CorruptParameterError(TbfaError, ValueError):
    """A parameter set cannot be factorized (non-SPD covariance, NaNs, ...)."""


class EmptyDataError(TbfaError, ValueError):
    """An operation needs at least one observation."""


class ConfigurationError(TbfaError, ValueError):
    """Invalid fitting configuration."""


class DivergenceError(TbfaError, ArithmeticError):
    """A fit produced a non-finite log-likelihood."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class SingularInformationError(TbfaError, ArithmeticError):
    """The Fisher information is singular on the free coordinates."""

    def __init__(self, message: str, null_directions):
        super().__init__(message)
        self.null_directions = null_directions


class SelectionError(TbfaError, RuntimeError):
    """Every cell of a model-selection grid failed."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class FormatError(TbfaError, ValueError):
    """A file does not follow the expected on-disk layout."""
