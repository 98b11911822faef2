"""Exception hierarchy shared by every module.

The CLI maps ``StormError`` subclasses to exit code 1 and
``InvariantViolation`` to exit code 2.
"""


class StormError(Exception):
    """Base class for user-facing errors."""


class ConfigError(StormError, ValueError):
    """Invalid configuration or hyperparameter combination."""


class DataError(StormError, ValueError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    """A row of an input file could not be parsed or violates a bar invariant."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InsufficientDataError(DataError):
    """Not enough rows to build the requested windows or indicators."""


class ModeError(StormError, RuntimeError):
    """An operation was invoked in the wrong mode (e.g. posterior at inference)."""


class TrainingDiverged(StormError, RuntimeError):
    """A non-finite loss was produced; ``components`` holds the breakdown."""

    def __init__(self, message: str, components: dict | None = None):
        self.components = dict(components or {})
        if self.components:
            parts = ", ".join(f"{k}={v}" for k, v in self.components.items())
            message = f"{message} [{parts}]"
        super().__init__(message)


class InvariantViolation(RuntimeError):
    """An internal accounting or consistency invariant failed."""
