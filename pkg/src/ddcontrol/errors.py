"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array argument has a shape inconsistent with the model dimensions."""


class ConfigurationError(ValueError):
    """Invalid configuration: bad keys, singular matrices, impossible settings."""


class NumericBlowupError(RuntimeError):
    """A non-finite value appeared mid-computation; message names the operation and step."""


class DegeneracyError(RuntimeError):
    """All posterior weights underflowed; the state estimate is lost."""


class FixedPointDivergenceError(RuntimeError):
    """The density-prediction fixed point diverged; a smaller time step is needed."""


class BudgetExceededError(RuntimeError):
    """A brute-force routine would exceed its node/time budget."""
