"""Error taxonomy mapped to CLI exit codes.

ConfigError -> exit 2, DataError -> exit 3, NumericalError -> exit 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value or config file."""


class DataError(ValueError):
    """Unreadable, malformed, or inconsistent input data."""


class NumericalError(RuntimeError):
    """Optimization failure (divergence, NaN loss, singular solve)."""
