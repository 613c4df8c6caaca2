"""Exceptions raised by the pipg package.

Every error derives from :class:`PipgError` and from the builtin it refines, so
callers can catch either ``PipgError`` or the usual ``ValueError`` /
``RuntimeError``.
"""

from __future__ import annotations


class PipgError(Exception):
    """Base class for all pipg errors."""


class InvalidArgumentError(PipgError, ValueError):
    """An argument has the wrong shape, sign or kind."""


class NumericInputError(PipgError, ValueError):
    """A value that must be finite is not.

    Args:
        message: Human readable description.
        iteration: Global iteration index where the value appeared, if known.
        pass_index: Pass over the dataset where the value appeared, if known.
    """

    def __init__(self, message: str, iteration: int | None = None, pass_index: int | None = None) -> None:
        super().__init__(message)
        self.iteration = iteration
        self.pass_index = pass_index


class InternalInvariantError(PipgError, RuntimeError):
    """A quantity that cannot be violated under valid inputs was violated."""


class IllConditionedError(PipgError, ValueError):
    """A metric or precision matrix could not be factorized."""


class OracleFailureError(PipgError, RuntimeError):
    """A brute-force reference did not converge within its budget."""


class SolverRunError(PipgError, RuntimeError):
    """A numeric failure inside a solver run, with its location."""

    def __init__(self, solver: str, pass_index: int, iteration: int, cause: Exception) -> None:
        super().__init__(f"{solver} failed at pass {pass_index}, iteration {iteration}: {cause}")
        self.solver = solver
        self.pass_index = pass_index
        self.iteration = iteration


class ConfigError(PipgError, ValueError):
    """An experiment configuration is invalid."""

    def __init__(self, message: str, line: int | None = None) -> None:
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")
        self.line = line


class DatasetParseError(PipgError, ValueError):
    """A dataset file does not follow the ``y,x_1,...,x_d`` layout."""

    def __init__(self, message: str, row: int) -> None:
        super().__init__(f"row {row}: {message}")
        self.row = row
