"""Exception types shared across the package."""


class AllSparkError(Exception):
    pass


class ShapeError(AllSparkError, ValueError):
    pass


class NumericError(AllSparkError, ArithmeticError):
    pass


class StateError(AllSparkError, RuntimeError):
    pass


class ContractError(AllSparkError, ValueError):
    pass


class UndefinedMetricError(ContractError):
    """Raised when a mean is taken over an empty set (all ignored / no valid class)."""


class FormatError(AllSparkError, ValueError):
    pass


class ConfigError(AllSparkError, ValueError):
    pass
