"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: configuration problems exit 2, input
parse problems exit 3, numerical or domain problems exit 4.
"""


class BevUncertError(Exception):
    """Base class for all package errors."""


class ConfigError(BevUncertError, ValueError):
    """Invalid configuration or parameter combination."""


class EmptyInputError(BevUncertError, ValueError):
    pass


class ParseError(BevUncertError, ValueError):
    """Malformed input file; carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class DomainError(BevUncertError, ValueError):
    """Value outside the mathematical domain of an operation."""


class GeometryError(DomainError):
    pass


class DegenerateHullError(GeometryError):
    """Fewer than three non-collinear points."""


class OrientationUndefinedError(DomainError):
    """Both orientation channels are zero so the angle is undefined."""


class TrainingDivergenceError(BevUncertError, FloatingPointError):
    pass
