"""Exception types shared across the package.

The CLI maps these onto exit codes: domain/configuration problems exit 1,
I/O problems exit 2, numeric failures exit 3.
"""


class ManifoldNerfError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DomainError(ManifoldNerfError, ValueError):
    """An argument lies outside the operation's domain."""


class DegenerateGeometryError(DomainError):
    """Zero-length, parallel or antipodal vectors where a frame or arc is needed."""


class InsufficientViewsError(DomainError):
    pass


class ConfigurationError(ManifoldNerfError, ValueError):
    pass


class GraphError(ManifoldNerfError):
    """Gradient request does not match the recorded computation."""


class NumericError(ManifoldNerfError, ArithmeticError):
    exit_code = 3


class CheckpointError(ManifoldNerfError):
    pass


class DatasetParseError(ManifoldNerfError):
    """Malformed transforms.json or scene file; message names file and field."""

    exit_code = 2

    def __init__(self, path, field, reason):
        self.path = str(path)
        self.field = field
        super().__init__(f"{self.path}: field {field!r}: {reason}")
