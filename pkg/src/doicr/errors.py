"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


class NumericError(FloatingPointError):
    """A computation produced a non-finite value."""


class ConfigurationError(ValueError):
    """A run configuration cannot be executed (e.g. calibration set too small)."""


class NonSmoothPointError(ArithmeticError):
    """A gradient check was requested at a point within one step of a kink."""
