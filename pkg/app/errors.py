"""
Exception hierarchy shared by every voltlab module.

Each error carries a human-readable ``detail`` and an ``exit_code`` that the
command-line entry point returns, the same way the service layer used to map
failures onto HTTP status codes.
"""
from typing import Any, List, Optional

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4


class VoltLabError(Exception):
    """Base class for all expected failures."""

    exit_code: int = EXIT_UNEXPECTED

    def __init__(self, detail: str, **context: Any):
        super().__init__(detail)
        self.detail = detail
        self.context = context

    def __str__(self) -> str:
        return self.detail


class ConfigError(VoltLabError):
    """Invalid configuration file, flag value or controller parameters."""

    exit_code = EXIT_USAGE


class TopologyError(VoltLabError):
    """Network violates the radial-tree invariants or an unknown bus was referenced."""

    exit_code = EXIT_INPUT

    def __init__(self, detail: str, violations: Optional[List[str]] = None):
        super().__init__(detail, violations=violations or [])
        self.violations = violations or []


class NetworkFormatError(VoltLabError):
    """Malformed network file; ``line`` is 1-based when known."""

    exit_code = EXIT_INPUT

    def __init__(self, detail: str, line: Optional[int] = None, field: Optional[str] = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{detail}", line=line, field=field)
        self.line = line
        self.field = field


class ProfileFormatError(VoltLabError):
    """Malformed profile CSV; ``row`` is the 1-based data row when known."""

    exit_code = EXIT_INPUT

    def __init__(self, detail: str, row: Optional[int] = None):
        where = f"row {row}: " if row is not None else ""
        super().__init__(f"{where}{detail}", row=row)
        self.row = row


class SensitivityError(VoltLabError):
    """Sensitivity matrix could not be inverted or failed its structural checks."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, detail: str, matrix: str):
        super().__init__(f"{matrix}: {detail}", matrix=matrix)
        self.matrix = matrix


class DimensionError(VoltLabError, ValueError):
    """Vector or matrix sizes do not agree."""

    exit_code = EXIT_NUMERICAL


class PowerFlowDivergedError(VoltLabError):
    """The plant did not converge; callers treat this as a plant fault."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, detail: str, iterations: int, residual: float):
        super().__init__(detail, iterations=iterations, residual=residual)
        self.iterations = iterations
        self.residual = residual


class ProjectionError(VoltLabError):
    """Reference projection or QP solver did not reach its tolerance."""

    exit_code = EXIT_NUMERICAL


class LocalityViolation(VoltLabError):
    """A message was addressed to a bus that is not an electrical neighbour."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, detail: str, messages: Optional[list] = None):
        super().__init__(detail, messages=messages or [])
        self.messages = messages or []
