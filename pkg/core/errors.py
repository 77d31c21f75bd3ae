"""
Exception hierarchy for the qMRI toolkit.

Every error that can reach the command line carries the process exit code
it maps to, so main.py can translate failures without inspecting messages.
"""

from typing import Any, Optional


class ToolkitError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1


class DomainError(ToolkitError, ValueError):
    """An operation was called outside its precondition."""

    exit_code = 2


class ConfigError(ToolkitError):
    """
    Invalid or incomplete run configuration.

    Attributes:
        field: Dotted path of the offending config entry (e.g. 'optimizer.tau0.rho').
    """

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class DataIntegrityError(ToolkitError):
    """Artifacts are missing, malformed, or do not match their manifest."""

    exit_code = 3


class NumericalError(ToolkitError):
    """
    A numerical failure (non-finite objective, divergence, failed assertion).

    Attributes:
        trace: Optional diagnostic payload, e.g. the IterationTrace up to the failure.
    """

    exit_code = 4

    def __init__(self, message: str, trace: Optional[Any] = None):
        self.trace = trace
        super().__init__(message)


class NumericalConsistencyError(NumericalError):
    """Complex round-off in the spectral path exceeded its tolerance."""
