"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(ValueError):
    """A configuration object is internally inconsistent."""


class NumericError(ArithmeticError):
    """Non-finite or otherwise invalid numeric values were encountered."""


class DeterminismError(RuntimeError):
    """A function expected to be deterministic produced differing outputs."""


class CheckpointError(IOError):
    """A checkpoint file is missing, truncated, or inconsistent."""
