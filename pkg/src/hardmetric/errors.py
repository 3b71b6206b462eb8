"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class HardMetricError(Exception):
    exit_code = 1


class ConfigurationError(HardMetricError, ValueError):
    exit_code = 2


class UsageError(HardMetricError, ValueError):
    exit_code = 2


class ProtocolError(HardMetricError, ValueError):
    exit_code = 2


class DataError(HardMetricError, ValueError):
    exit_code = 2


class ParseError(HardMetricError, ValueError):
    exit_code = 2

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(HardMetricError, IOError):
    exit_code = 4


class NumericError(HardMetricError, ArithmeticError):
    """Non-finite loss. ``context`` holds the iteration index and breakdown."""

    exit_code = 3

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = dict(context or {})
