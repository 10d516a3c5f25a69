"""Exception types shared across the package.

Everything raised on purpose derives from IcpExplainError, so callers can
catch one base class at CLI or harness level. ValueError/OSError are still
used for garden-variety argument and file problems.
"""


class IcpExplainError(Exception):
    """Base class for all package-specific errors."""


class AngleNearPi(IcpExplainError):
    """Rotation angle too close to pi for a stable logarithm."""


class ParseError(IcpExplainError):
    """Malformed input file; message carries the file path and line number."""

    def __init__(self, path, line_number, message):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{self.path}:{line_number}: {message}")


class InsufficientOverlap(IcpExplainError):
    """Requested overlap reduction exceeds the available overlap."""


class NoCorrespondences(IcpExplainError):
    """Correspondence search produced an empty pair set."""


class DegenerateConfiguration(IcpExplainError):
    """Point configuration does not determine a rigid transform."""


class SingularCovariance(IcpExplainError):
    """Covariance matrix is not positive definite where it must be."""


class SingularDesign(IcpExplainError):
    """Weighted regression design matrix is numerically singular."""


class ArityMismatch(IcpExplainError):
    """Number of records does not match what the plot kind expects."""


class EmptyGroup(IcpExplainError):
    """Aggregation over a group with no surviving values."""
