"""
Errors raised by the signal-processing layer.
"""
from apps.core.exceptions import DimensionError, InputError, UsageError

__all__ = ['DimensionError', 'InputError', 'UsageError']
