"""Exception hierarchy shared by the library and the CLI.

Each exception carries the process exit code the CLI maps it to.
"""

from __future__ import annotations


class MarsError(Exception):
    exit_code = 1


class UsageError(MarsError, ValueError):
    exit_code = 64


class TelemetryParseError(MarsError, ValueError):
    exit_code = 64

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TelemetryValidationError(TelemetryParseError):
    pass


class NumericRangeError(MarsError, ArithmeticError):
    exit_code = 3


class IdentifiabilityError(MarsError, ValueError):
    exit_code = 2

    def __init__(self, message: str, axis: str | None = None, stage: str | None = None):
        self.axis = axis
        self.stage = stage
        if stage:
            message = f"[{stage}] {message}"
        super().__init__(message)


class FitFailure(MarsError, RuntimeError):
    exit_code = 3

    def __init__(self, message: str, stage: str | None = None):
        self.stage = stage
        if stage:
            message = f"[{stage}] {message}"
        super().__init__(message)


class GridMismatchError(MarsError, ValueError):
    exit_code = 2


class SimulationConfigError(MarsError, ValueError):
    exit_code = 64
