"""
Errors raised while generating, loading or sampling the synthetic corpus.
"""
from apps.core.exceptions import ConfigError, DimensionError, InputError

__all__ = ['ConfigError', 'DimensionError', 'InputError']
