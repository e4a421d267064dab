"""Exception hierarchy shared across the pipeline.

The CLI maps ConfigurationError to exit code 2 (usage/config problems)
and every other SmmrecError to exit code 1 (runtime failures).
"""


class SmmrecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SmmrecError):
    """Invalid configuration, arguments, or file formats."""


class DataError(SmmrecError):
    """Input data violates a pipeline precondition (e.g. empty train set)."""


class NumericError(SmmrecError):
    """Non-finite values encountered during optimization or checking."""
