"""
Exception hierarchy for the SeeCo worker.

Library code raises these; entry points (cli.py, main.py, tasks.py) catch
them, log, and translate them into exit codes / HTTP errors / task failures.
"""


class SeeCoError(Exception):
    """Base class. `exit_code` is what the CLI returns when this escapes."""

    exit_code = 3


# Configuration / usage (exit 1)

class ConfigError(SeeCoError):
    exit_code = 1


class UsageError(SeeCoError):
    exit_code = 1


# Data errors (exit 2)

class DataError(SeeCoError, ValueError):
    exit_code = 2


class ShapeMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class InvalidTemperature(DataError):
    pass


class EmptyCategory(DataError):
    pass


class MissingCategory(DataError):
    def __init__(self, name: str):
        super().__init__(f"No synonym entry for category '{name}'")
        self.name = name


class InconsistentSynonymCount(DataError):
    pass


class FormatError(DataError):
    def __init__(self, message: str, line: int = 0):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}")
        self.line = line


class NonSquareInput(DataError):
    pass


class UnsupportedViewCount(DataError):
    pass


class WindowTooLarge(DataError):
    pass


class NonFiniteValue(DataError):
    pass


# Internal invariant violations (exit 3)

class StaleGraph(SeeCoError):
    pass


class StateUninitialized(SeeCoError):
    pass


class InvariantViolation(SeeCoError):
    pass


class AdaptationDiverged(SeeCoError):
    pass


class DuplicateParameter(SeeCoError):
    pass
