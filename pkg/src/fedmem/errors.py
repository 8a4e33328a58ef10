"""Exception hierarchy shared by every fedmem module."""

from __future__ import annotations


class FedMemError(Exception):
    """Base class for all library errors."""


class ConfigurationError(FedMemError, ValueError):
    """A configuration or shape contract was violated before any work ran."""


class InputError(FedMemError, ValueError):
    """A caller passed data outside the accepted domain."""


class NumericError(FedMemError, ArithmeticError):
    """A non-finite value showed up where finite values are required."""


class ParseError(FedMemError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PartitionError(FedMemError, RuntimeError):
    """The partitioner could not satisfy its constraints."""


class TrainingError(FedMemError, RuntimeError):
    """Loss diverged during a training loop."""


class AggregationError(FedMemError, ValueError):
    """Client updates could not be combined."""


class InterpolationError(FedMemError, ValueError):
    pass


class SemanticError(FedMemError, KeyError):
    """A class has no semantic embedding."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ReportError(FedMemError, ValueError):
    pass
