"""Exception types shared across trajcast."""


class TrajcastError(Exception):
    """Base class for all trajcast errors."""


class DimensionError(TrajcastError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(TrajcastError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ConsistencyError(TrajcastError, KeyError):
    """Named collections (params, grads, optimizer state) are misaligned."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ConfigError(TrajcastError, ValueError):
    """Invalid configuration value or unknown key."""


class SchemaError(TrajcastError, ValueError):
    """Scene or prediction record violates the file schema."""


class ParseError(TrajcastError, ValueError):
    """Input file could not be decoded."""


class CheckpointError(TrajcastError, ValueError):
    """Checkpoint files are corrupt or do not match the model."""
