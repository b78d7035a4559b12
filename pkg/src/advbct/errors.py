class AdvBCTError(Exception):
    """Base class for toolkit errors."""


class ShapeError(AdvBCTError, ValueError):
    pass


class DegenerateVectorError(AdvBCTError, ValueError):
    pass


class NumericError(AdvBCTError, ArithmeticError):
    """Non-finite values appeared (divergence, bad inputs)."""


class ConfigError(AdvBCTError, ValueError):
    pass


class DataError(AdvBCTError, ValueError):
    """Malformed or unusable dataset contents."""


class UndefinedMetricError(AdvBCTError, ArithmeticError):
    pass


class FormatError(AdvBCTError, ValueError):
    """Corrupt or unsupported binary container."""
