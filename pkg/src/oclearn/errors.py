"""Exception hierarchy shared by all solvers."""

from __future__ import annotations


class OclearnError(Exception):
    """Base class for every error raised by the package."""


class InvalidSpecError(OclearnError, ValueError):
    """A problem definition violates its type invariants."""


class DimensionError(InvalidSpecError):
    pass


class DivergenceError(OclearnError, ArithmeticError):
    """A simulation or iteration produced non-finite or unbounded values."""

    def __init__(self, message: str, step: int | None = None, residual: float | None = None):
        super().__init__(message)
        self.step = step
        self.residual = residual


class FiniteEscapeError(DivergenceError):
    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class StabilityError(OclearnError, ValueError):
    """Explicit PDE step violates the stability bound."""

    def __init__(self, message: str, suggested_dt: float):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class LmdpConditionError(InvalidSpecError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class DegenerateWeightsError(OclearnError, ArithmeticError):
    pass


class BasisDegeneracyError(OclearnError, ArithmeticError):
    pass


class SingularDesignError(OclearnError, ArithmeticError):
    pass


class SingularSystemError(OclearnError, ArithmeticError):
    pass


class RegularizationError(OclearnError, ArithmeticError):
    pass


class ZeroCurvatureError(OclearnError, ArithmeticError):
    pass


class NoPathError(OclearnError, LookupError):
    pass


class EpisodeCapError(OclearnError, RuntimeError):
    pass


class ContractError(OclearnError, ValueError):
    """Input is missing data an operation requires."""


class ConfigError(OclearnError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
