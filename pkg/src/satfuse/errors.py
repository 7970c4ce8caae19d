"""Exception hierarchy shared by all satfuse modules."""


class SatFuseError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SatFuseError, ValueError):
    pass


class NumericError(SatFuseError, ArithmeticError):
    pass


class EvaluationError(SatFuseError, ArithmeticError):
    """A function under finite-difference evaluation returned a non-finite value."""


class DegenerateConfigurationError(SatFuseError, ValueError):
    pass


class FormatError(SatFuseError, ValueError):
    pass


class CheckpointError(SatFuseError, ValueError):
    pass


class ConfigError(SatFuseError, ValueError):
    pass
