"""
Errors raised by the separation metrics and the evaluation service.
"""
from apps.core.exceptions import DimensionError, InputError, RegressionError

__all__ = ['DimensionError', 'InputError', 'RegressionError']
