"""Exception hierarchy.

Every failure mode the library reports deliberately (as opposed to plain bugs)
derives from BilevelError so callers can catch one base class. The CLI maps
ConfigError/ParseError/InfeasiblePlanError to exit code 2 and NumericalError
(including SingularMatrixError) to exit code 3.
"""

from __future__ import annotations


class BilevelError(Exception):
    """Base class for all deliberate library errors."""


class ContractViolationError(BilevelError):
    """An argument violated a documented precondition (shape, dtype, range)."""


class NumericalError(BilevelError):
    """A numerical procedure failed: non-finite values, divergence, breakdown.

    step_index, when known, names the iteration at which the failure occurred.
    """

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


class SingularMatrixError(NumericalError):
    """A direct solve hit a (numerically) singular matrix."""


class ConfigError(BilevelError):
    """A config value failed validation. field_path names the offending key."""

    def __init__(self, message: str, field_path: str = ""):
        super().__init__(message)
        self.field_path = field_path


class ParseError(ConfigError):
    """The config file could not be parsed at all. line is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message, field_path="")
        self.line = line


class InfeasiblePlanError(ConfigError):
    """A split plan asks for more than the data admits (e.g. U > C(n, m_val))."""
