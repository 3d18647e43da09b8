"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid experiment configuration or malformed input file."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or an inconsistent result."""
