"""Exception types raised across warpgrad."""


class WarpgradError(Exception):
    """Base class for all library errors."""


class DimensionError(WarpgradError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(WarpgradError, ValueError):
    """A documented precondition was violated."""


class NumericError(WarpgradError, FloatingPointError):
    """A non-finite value was produced or supplied."""


class TapeError(WarpgradError, RuntimeError):
    """Misuse of a differentiation tape (reuse after backward, foreign loss, ...)."""


class ConfigError(WarpgradError, ValueError):
    """A run configuration failed validation.

    ``violations`` lists every problem found, not just the first.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
