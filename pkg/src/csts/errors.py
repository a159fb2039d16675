"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor/array dimensions do not satisfy an operation's contract."""


class ContractError(ValueError):
    """An operation precondition other than shape was violated."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(ValueError):
    """A file on disk is missing, malformed, or in an unsupported format."""


class StateError(RuntimeError):
    """An operation was invoked before the state it relies on exists."""


class NumericsError(FloatingPointError):
    """A forward op produced NaN; the step is aborted rather than letting it spread."""


class EvalError(ValueError):
    """An evaluation had no valid data to score."""
