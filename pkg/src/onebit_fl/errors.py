"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad dimensions, ranges, or unknown keys."""


class NumericError(ArithmeticError):
    """NaN/Inf or other numeric failure during computation."""


class PayloadError(ValueError):
    """Corrupt or mis-sized wire payload."""


class DataFormatError(ValueError):
    """Malformed dataset file."""
