"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class StegoError(Exception):
    exit_code = 1


class ConfigError(StegoError, ValueError):
    """Invalid configuration or parameter value."""

    exit_code = 2


class ContractError(StegoError, ValueError):
    """Inputs violate a shape or precondition contract."""

    exit_code = 2


class ImageIOError(StegoError, OSError):
    exit_code = 3


class DecodeError(ImageIOError):
    pass


class FormatError(ImageIOError):
    pass


class UndefinedMetricError(StegoError, ArithmeticError):
    """A metric has no defined value for the given inputs (e.g. zero norm)."""

    exit_code = 4


class NumericError(StegoError, ArithmeticError):
    """Non-finite values during training."""

    exit_code = 4
