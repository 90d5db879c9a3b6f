"""Exception hierarchy shared across the pipeline.

The CLI maps each family to a distinct process exit code.
"""


class SartolError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SartolError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class DataError(SartolError, ValueError):
    """Input data is malformed, truncated or inconsistent."""


class NumericError(SartolError, FloatingPointError):
    """A computation produced a non-finite value."""
