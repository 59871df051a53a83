"""Exception hierarchy.

Every error raised on bad input derives from ValueError so callers that only
care about "invalid input" can catch that.
"""

from typing import Optional


class CpuDseError(ValueError):
    """Base class for all toolkit errors."""


class TraceParseError(CpuDseError):
    """Malformed line in a trace or profile file."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class TraceValidationError(TraceParseError):
    """Well-formed line whose fields violate a TraceRecord invariant."""


class TokenizationError(CpuDseError):
    pass


class DesignSpaceError(CpuDseError):
    pass


class EncodingError(DesignSpaceError):
    """Raw value or rank that does not belong to a parameter's value list."""

    def __init__(self, message: str, parameter: Optional[str] = None):
        self.parameter = parameter
        super().__init__(message)


class ConfigurationError(CpuDseError):
    pass


class SimulationError(CpuDseError):
    pass


class ModelError(CpuDseError):
    pass


class DatasetError(CpuDseError):
    pass


class SearchError(CpuDseError):
    pass


class ExhaustiveCapError(SearchError):
    pass


class ReportError(CpuDseError):
    """Results directory holds nothing that can be reported."""
