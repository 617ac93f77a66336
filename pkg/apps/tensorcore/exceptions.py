"""
Errors raised by the tensor engine.
Re-exported from apps.core.exceptions so callers can catch either.
"""
from apps.core.exceptions import ConfigError, DimensionError, UsageError

__all__ = ['ConfigError', 'DimensionError', 'UsageError']
