"""
Errors raised by the training loop, fine-tuning and ablations.
"""
from apps.core.exceptions import ConfigError, InputError, NumericError, UsageError

__all__ = ['ConfigError', 'InputError', 'NumericError', 'UsageError']
