"""Error types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad dimensions, ranges, or file contents."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""
