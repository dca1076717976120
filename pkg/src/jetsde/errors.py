"""Exception hierarchy shared by every module in the package."""

from __future__ import annotations


class JetSdeError(Exception):
    """Base class for all package errors."""


class DomainError(JetSdeError, ValueError):
    """An argument fell outside the domain of a function (log of a negative, x/0, ...)."""

    def __init__(self, message: str, value=None):
        super().__init__(message)
        self.value = value


class ShapeError(JetSdeError, ValueError):
    pass


class ExprSyntaxError(JetSdeError, SyntaxError):
    """Malformed expression text. Carries 1-based line and column."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnknownSymbol(JetSdeError, NameError):
    pass


class ArityError(JetSdeError, TypeError):
    pass


class ConfigError(JetSdeError, ValueError):
    pass


class ModelError(JetSdeError, ValueError):
    """A model document or model object is malformed."""


class MetricError(JetSdeError, ValueError):
    pass


class AtlasError(JetSdeError, LookupError):
    pass


class UnsupportedPlot(JetSdeError, ValueError):
    pass
