"""
Errors raised by the separation network.
"""
from apps.core.exceptions import ConfigError, DimensionError, InputError, UsageError

__all__ = ['ConfigError', 'DimensionError', 'InputError', 'UsageError']
