"""
Exception hierarchy shared by every iQuery app.
Raised by the engines and translated to exit codes by the management commands.

Exit codes:
  1  I/O and input problems (missing files, bad corpus, bad checkpoint)
  2  configuration and usage errors (malformed config, shape misuse)
  3  numeric failure (NaN/Inf during training)
  4  evaluation drifted from a recorded report
"""


class IQueryError(Exception):
    """Base exception for all iQuery errors."""
    exit_code = 1


class InputError(IQueryError):
    """Raised when input data is missing, too short or inconsistent."""
    exit_code = 1


class CheckpointError(IQueryError):
    """Raised when a checkpoint cannot be read, has a bad magic or an unknown version."""
    exit_code = 1


class ConfigError(IQueryError):
    """Raised when a configuration value is malformed or violates an invariant."""
    exit_code = 2

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UsageError(IQueryError):
    """Raised when an operation is called in the wrong state (e.g. prompting during pre-training)."""
    exit_code = 2


class DimensionError(IQueryError):
    """Raised when array shapes are incompatible; the message names both shapes."""
    exit_code = 2

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class NumericError(IQueryError):
    """Raised when a loss or gradient becomes NaN/Inf."""
    exit_code = 3


class RegressionError(IQueryError):
    """Raised when evaluation medians drift from a recorded report by more than the tolerance."""
    exit_code = 4
